import json
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

from mixfem.covariance import ErrorCovariance, build_H_Q
from mixfem.data import build_observation_set
from mixfem.inference import (
    InferenceError,
    asymptotic_summary,
    info_matrix_sigma,
    inference_report,
    var_beta,
    var_field,
    variance_component_ci,
)
from mixfem.mesh import PdeCoefficients, unit_square_mesh
from mixfem.solver import ModelFit, build_components, fit_components
from mixfem.splines import cubic_spline_basis

from test_solver import tiny_problem


def manual_fit(comps, beta, f, sigma_b2, sigma2, b_hat, lam=(1e-3, 1e-3)):
    d = np.atleast_2d(sigma_b2 / sigma2)
    return ModelFit(
        beta=np.asarray(beta, dtype=float), field_coeffs=f,
        sigma_b=np.atleast_2d(sigma_b2), sigma2=sigma2, rel_precision=d,
        rel_precision_factor=np.linalg.cholesky(np.linalg.inv(d)).T,
        random_effects=b_hat, lambda_space=lam[0], lambda_time=lam[1],
        n_iter=1, loglik_trace=(0.0,), converged=True)


def saturated_problem(seed=60):
    """n_obs > NM and full-rank B, so the penalty-free limit is defined."""
    rng = np.random.default_rng(seed)
    mesh = unit_square_mesh(1)  # 4 nodes
    basis = cubic_spline_basis(4)  # NM = 16
    locations = rng.uniform(0.05, 0.95, size=(6, 2))
    times = np.linspace(0, 1, 5)
    li = np.repeat(np.arange(6), 5)
    ti = np.tile(np.arange(5), 6)
    gl = ["a" if i % 2 else "b" for i in li]
    X = rng.normal(size=(30, 2))
    y = rng.normal(size=30)
    obs = build_observation_set(locations, times, li, ti, gl, y, X,
                                np.ones((30, 1)))
    pde = PdeCoefficients(
        diffusion=np.tile(np.eye(2), (mesh.n_triangles, 1, 1)),
        advection=np.zeros((mesh.n_triangles, 2)),
        reaction=np.ones(mesh.n_triangles), xi=0.0)
    return obs, build_components(obs, mesh, basis, pde)


class TestVarField:
    def test_penalty_free_limit_recovers_omega(self):
        obs, comps = saturated_problem()
        fit = fit_components(comps, 1e-12, 1e-12)
        vf = var_field(comps, fit)
        cov = ErrorCovariance(obs, fit.rel_precision)
        hq = build_H_Q(cov)
        gram = hq.gram_bqb(comps.B, comps.base_gram) / obs.n_obs
        limit = fit.sigma2 / obs.n_obs * np.linalg.inv(gram)
        assert np.allclose(vf, limit, rtol=1e-4)

    def test_zero_noise_gives_zero_variance(self):
        obs, comps = tiny_problem(seed=61, noise=0.2)
        fit = fit_components(comps, 1e-3, 1e-3)
        zero_fit = replace(fit, sigma2=0.0)
        assert np.allclose(var_field(comps, zero_fit), 0.0)

    def test_diagonal_path_matches_dense(self):
        obs, comps = tiny_problem(seed=62, noise=0.2)
        fit = fit_components(comps, 1e-3, 1e-3)
        dense = var_field(comps, fit, diagonal_only=False)
        diag = var_field(comps, fit, diagonal_only=True)
        assert np.allclose(diag, np.diag(dense), atol=1e-12)

    @pytest.mark.slow
    def test_monte_carlo_field_variance_within_factor_two(self):
        rng = np.random.default_rng(63)
        n_rep = 200
        obs0, comps0 = tiny_problem(seed=63, n_loc=10, g=2, drop=0,
                                    noise=0.25, sigma_b=0.15)
        fit0 = fit_components(comps0, 1e-2, 1e-2)
        vf = var_field(comps0, fit0, diagonal_only=True)
        draws = np.zeros((n_rep, comps0.n_coeffs))
        for r in range(n_rep):
            b_true = rng.normal(scale=0.15, size=obs0.n_groups)
            y = (b_true[obs0.group_idx]
                 + rng.normal(scale=0.25, size=obs0.n_obs))
            obs_r = build_observation_set(
                obs0.locations, obs0.times, obs0.loc_idx, obs0.time_idx,
                np.asarray(obs0.group_labels)[obs0.group_idx], y,
                obs0.X, obs0.Z)
            comps_r = replace(comps0, obs=obs_r)
            fit_r = fit_components(comps_r, 1e-2, 1e-2)
            draws[r] = fit_r.field_coeffs
        emp = draws.var(axis=0)
        # compare informative coefficients (those with nonnegligible
        # predicted variance)
        mask = vf > 0.25 * vf.max()
        ratio = emp[mask] / vf[mask]
        assert np.median(ratio) < 2.0
        assert np.median(ratio) > 0.5


class TestVarBeta:
    def test_reduces_to_gls_without_field(self):
        obs, comps = saturated_problem(seed=64)
        fit = fit_components(comps, 1e-2, 1e-2)
        zero_b = sp.csr_matrix(comps.B.shape)
        comps_nf = replace(comps, B=zero_b,
                           base_gram=np.zeros((comps.n_coeffs,
                                               comps.n_coeffs)))
        fit_nf = replace(fit, field_coeffs=np.zeros(comps.n_coeffs))
        vb = var_beta(comps_nf, fit_nf)
        cov = ErrorCovariance(obs, fit.rel_precision)
        sig = cov.dense_sigma_e()
        gls = fit.sigma2 * np.linalg.inv(
            obs.X.T @ np.linalg.solve(sig, obs.X))
        assert np.allclose(vb, gls, atol=1e-10)

    def test_orthonormal_design_identity_first_term(self):
        # Sigma_e ~ I and orthonormal X: the GLS term is sigma^2 * I
        obs, comps = saturated_problem(seed=65)
        qmat, _ = np.linalg.qr(obs.X)
        obs2 = build_observation_set(
            obs.locations, obs.times, obs.loc_idx, obs.time_idx,
            np.asarray(obs.group_labels)[obs.group_idx], obs.y, qmat, obs.Z)
        comps2 = build_components(obs2, comps.mesh, comps.basis, comps.pde)
        fit = fit_components(comps2, 1e-2, 1e-2)
        near_zero_d = replace(fit, rel_precision=np.array([[1e-300]]))
        zero_b = sp.csr_matrix(comps2.B.shape)
        comps_nf = replace(comps2, B=zero_b,
                           base_gram=np.zeros((comps2.n_coeffs,
                                               comps2.n_coeffs)))
        vb = var_beta(comps_nf, near_zero_d)
        assert np.allclose(vb, fit.sigma2 * np.eye(2), atol=1e-8)

    def test_q_zero_rejected(self):
        obs, comps = tiny_problem(seed=66, q=0)
        fit = fit_components(comps, 1e-3, 1e-3)
        with pytest.raises(InferenceError, match="no fixed effects"):
            var_beta(comps, fit)

    @pytest.mark.slow
    def test_monte_carlo_beta_sd_within_factor_two(self):
        rng = np.random.default_rng(67)
        n_rep = 200
        obs0, comps0 = tiny_problem(seed=67, n_loc=12, g=3, drop=0,
                                    noise=0.25, sigma_b=0.15)
        beta_true = np.array([1.0, -1.0])
        fit0 = fit_components(comps0, 1e-2, 1e-2)
        predicted_sd = np.sqrt(var_beta(comps0, fit0)[0, 0])
        draws = np.zeros(n_rep)
        for r in range(n_rep):
            b_true = rng.normal(scale=0.15, size=obs0.n_groups)
            y = (obs0.X @ beta_true + b_true[obs0.group_idx]
                 + rng.normal(scale=0.25, size=obs0.n_obs))
            obs_r = build_observation_set(
                obs0.locations, obs0.times, obs0.loc_idx, obs0.time_idx,
                np.asarray(obs0.group_labels)[obs0.group_idx], y,
                obs0.X, obs0.Z)
            comps_r = replace(comps0, obs=obs_r)
            draws[r] = fit_components(comps_r, 1e-2, 1e-2).beta[0]
        emp_sd = draws.std()
        assert 0.5 < emp_sd / predicted_sd < 2.0


class TestInfoMatrix:
    def test_noise_entry_forced_arithmetic(self):
        # two groups with residual norms 3 and 5 at sigma = 1: entry 16
        rng = np.random.default_rng(68)
        locations = rng.random((4, 2))
        li = np.arange(4)
        ti = np.zeros(4, dtype=int)
        gl = ["a", "a", "b", "b"]
        y = np.array([np.sqrt(3.0), 0.0, np.sqrt(5.0), 0.0])
        obs = build_observation_set(locations, [0.0], li, ti, gl, y,
                                    np.zeros((4, 0)), np.ones((4, 1)))
        mesh = unit_square_mesh(2)
        comps = build_components(obs, mesh, cubic_spline_basis(4),
                                 PdeCoefficients(
                                     diffusion=np.tile(np.eye(2),
                                                       (8, 1, 1)),
                                     advection=np.zeros((8, 2)),
                                     reaction=np.zeros(8), xi=0.0))
        fit = manual_fit(comps, np.zeros(0),
                         np.zeros(comps.n_coeffs), sigma_b2=0.04,
                         sigma2=1.0, b_hat=np.zeros((2, 1)))
        info = info_matrix_sigma(comps, fit)
        assert np.isclose(info[0, 0], 16.0)
        assert info.shape == (2, 2)
        assert info[0, 1] == 0.0 and info[1, 0] == 0.0

    def test_boundary_of_positivity_flags_unavailable(self):
        obs, comps = tiny_problem(seed=69, q=0, g=3, noise=0.2)
        # sum of squared effects = g sigma_b^2 / 3 = 0.0625, exact in binary
        b_hat = np.array([[0.25], [0.0], [0.0]])
        fit = manual_fit(comps, np.zeros(0), np.zeros(comps.n_coeffs),
                         sigma_b2=0.0625, sigma2=1.0, b_hat=b_hat)
        info = info_matrix_sigma(comps, fit)
        assert info[1, 1] == 0.0
        ci = variance_component_ci(comps, fit)
        assert ci["sigma_b"][0]["available"] is False
        assert ci["sigma"]["available"] is True

    def test_nondiagonal_sigma_b_rejected(self):
        rng = np.random.default_rng(70)
        obs, comps = tiny_problem(seed=70, noise=0.2)
        fit = fit_components(comps, 1e-3, 1e-3)
        bad = replace(fit, sigma_b=np.array([[0.2, 0.1], [0.1, 0.2]]),
                      random_effects=np.zeros((obs.n_groups, 2)))
        with pytest.raises(InferenceError, match="diagonal"):
            info_matrix_sigma(comps, bad)

    def test_report_is_valid_json_with_cis(self):
        obs, comps = tiny_problem(seed=71, noise=0.2)
        fit = fit_components(comps, 1e-3, 1e-3)
        doc = json.loads(inference_report(comps, fit, level=0.99))
        assert doc["level"] == 0.99
        assert len(doc["beta"]) == 2
        for entry in doc["beta"]:
            assert entry["lower"] <= entry["estimate"] <= entry["upper"]
        assert doc["variance_components"]["sigma"]["estimate"] > 0

    def test_summary_shapes(self):
        obs, comps = tiny_problem(seed=72, noise=0.2)
        fit = fit_components(comps, 1e-3, 1e-3)
        summ = asymptotic_summary(comps, fit)
        nm = comps.n_coeffs
        assert summ.var_field.shape == (nm, nm)
        assert not summ.var_field_is_diagonal
        assert summ.var_beta.shape == (2, 2)
        assert np.all(np.linalg.eigvalsh(summ.var_beta) > -1e-12)
        assert summ.info_sigma.shape == (2, 2)
        assert summ.omega is not None and summ.omega.shape == (nm, nm)
        assert summ.xi is not None and summ.xi.shape == (2, 2)
