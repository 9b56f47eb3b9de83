"""Asymptotic variances and confidence intervals for a converged fit.

Finite-sample versions of the limiting matrices are used throughout: the
field precision Omega_n = n (B'QB)^-1 and the whitened design Gram
Xi_n = X' Sigma_e^-1 X / n.  The field variance is the sandwich

    var_f = (sigma^2 / n) (Omega_n^-1 + P)^-1 Omega_n^-1 (Omega_n^-1 + P)^-1

and the fixed-effect variance adds the field-induced correction to the
classical GLS term.  Variance-component intervals come from the diagonal
empirical information matrix of (log sigma, sigma_b_1..p), valid for
independent random effects (diagonal Sigma_b).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.stats import norm

from .covariance import ErrorCovariance, build_H_Q
from .solver import FitComponents, ModelFit, _data_residual

DENSE_COEFF_LIMIT = 2000


class InferenceError(RuntimeError):
    """Inference request invalid for this fit."""


@dataclass(frozen=True)
class AsymptoticSummary:
    """Variance matrices and variance-component information for one fit."""

    var_field: np.ndarray = field(repr=False)  # (NM, NM) or (NM,) diagonal
    var_field_is_diagonal: bool
    var_beta: np.ndarray  # (q, q)
    info_sigma: np.ndarray  # (1 + p, 1 + p) diagonal
    omega: np.ndarray | None = field(repr=False, default=None)
    xi: np.ndarray | None = None


def _field_workspace(components: FitComponents, fit: ModelFit):
    obs = components.obs
    n = obs.n_obs
    cov = ErrorCovariance(obs, fit.rel_precision)
    hq = build_H_Q(cov)
    gram = hq.gram_bqb(components.B, components.base_gram) / n  # Omega_n^-1
    system = components.penalty_system(fit.lambda_space, fit.lambda_time)
    t_mat = gram + system.penalty_dense()
    try:
        chol = sla.cho_factor(t_mat, lower=True)
    except np.linalg.LinAlgError as exc:
        raise InferenceError(f"singular field system: {exc}") from exc
    return cov, hq, gram, chol


def var_field(components: FitComponents, fit: ModelFit,
              diagonal_only: bool | None = None) -> np.ndarray:
    """Sandwich covariance of the field coefficients.

    Above ``DENSE_COEFF_LIMIT`` coefficients only the diagonal is computed
    (solve per column); pass ``diagonal_only`` to force either form.
    """
    n = components.obs.n_obs
    nm = components.n_coeffs
    _, _, gram, chol = _field_workspace(components, fit)
    if diagonal_only is None:
        diagonal_only = nm > DENSE_COEFF_LIMIT
    if diagonal_only:
        # diag((T^-1) Omega_n^-1 (T^-1)) by blocks of columns, avoiding a
        # second dense NM x NM product
        diag = np.empty(nm)
        step = 256
        for start in range(0, nm, step):
            cols = min(step, nm - start)
            rhs = np.zeros((nm, cols))
            rhs[start:start + cols] = np.eye(cols)
            sol = sla.cho_solve(chol, rhs)  # T^-1 e_i columns
            diag[start:start + cols] = np.einsum("ij,ij->j", sol, gram @ sol)
        return fit.sigma2 / n * diag
    inner = sla.cho_solve(chol, gram)  # T^-1 Omega_n^-1
    sandwich = sla.cho_solve(chol, inner.T)
    sandwich = 0.5 * (sandwich + sandwich.T)
    return fit.sigma2 / n * sandwich


def var_beta(components: FitComponents, fit: ModelFit) -> np.ndarray:
    """Covariance of the fixed-effect estimates.

    The first term is the classical GLS variance; the second accounts for
    plugging in the estimated field.
    """
    obs = components.obs
    q = obs.n_fixed
    if q == 0:
        raise InferenceError("no fixed effects in this model")
    n = obs.n_obs
    cov, hq, gram, chol = _field_workspace(components, fit)
    xi = (obs.X.T @ hq.whitened_x) / n
    xi_inv = np.linalg.inv(xi)
    bw = (components.B.T @ hq.whitened_x)  # (NM, q)
    sandwich_b = sla.cho_solve(chol, sla.cho_solve(chol, gram).T) @ bw
    correction = bw.T @ sandwich_b / n ** 2
    out = fit.sigma2 / n * (xi_inv + xi_inv @ correction @ xi_inv)
    return 0.5 * (out + out.T)


def info_matrix_sigma(components: FitComponents, fit: ModelFit,
                      diag_rtol: float = 1e-8) -> np.ndarray:
    """Empirical information matrix of (log sigma, sigma_b_1..p).

    Requires an (at least numerically) diagonal random-effect covariance.
    The matrix is diagonal by construction; entries can be negative when
    the sample carries too little information, in which case the interval
    for that component is reported unavailable.
    """
    obs = components.obs
    p = obs.n_random
    sigma_b = fit.sigma_b
    off = sigma_b - np.diag(np.diag(sigma_b))
    if np.abs(off).max() > diag_rtol * max(np.abs(np.diag(sigma_b)).max(),
                                           1e-300):
        raise InferenceError(
            "variance-component inference assumes independent random "
            "effects (diagonal Sigma_b)")
    resid = _data_residual(obs, components.B, fit.beta, fit.field_coeffs)
    eps_sq = 0.0
    for k in range(obs.n_groups):
        sl = obs.group_slice(k)
        rk = resid[sl] - obs.Z[sl] @ fit.random_effects[k]
        eps_sq += rk @ rk
    info = np.zeros((1 + p, 1 + p))
    info[0, 0] = 2.0 * eps_sq / fit.sigma2
    sb_diag = np.sqrt(np.maximum(np.diag(sigma_b), 1e-300))
    g = obs.n_groups
    for j in range(p):
        bj_sq = float((fit.random_effects[:, j] ** 2).sum())
        info[j + 1, j + 1] = 3.0 * bj_sq / sb_diag[j] ** 4 - g / sb_diag[j] ** 2
    return info


def variance_component_ci(components: FitComponents, fit: ModelFit,
                          level: float = 0.99) -> dict:
    """Confidence intervals for the noise and random-effect scales.

    The noise interval is built on the log scale and exponentiated; the
    random-effect intervals are on the natural scale.  Components whose
    information entry is nonpositive are flagged unavailable.
    """
    if not 0.0 < level < 1.0:
        raise InferenceError("level must be in (0, 1)")
    info = info_matrix_sigma(components, fit)
    z = float(norm.ppf(0.5 * (1.0 + level)))
    out: dict = {"level": level, "sigma": None, "sigma_b": []}
    sigma_hat = float(np.sqrt(fit.sigma2))
    if info[0, 0] > 0:
        half = z / np.sqrt(info[0, 0])
        out["sigma"] = {
            "estimate": sigma_hat,
            "lower": float(np.exp(np.log(sigma_hat) - half)),
            "upper": float(np.exp(np.log(sigma_hat) + half)),
            "available": True,
        }
    else:
        out["sigma"] = {"estimate": sigma_hat, "lower": None, "upper": None,
                        "available": False}
    sb_diag = np.sqrt(np.diag(fit.sigma_b))
    for j, sb in enumerate(sb_diag):
        entry = info[j + 1, j + 1]
        if entry > 0:
            half = z / np.sqrt(entry)
            out["sigma_b"].append({
                "estimate": float(sb), "lower": float(sb - half),
                "upper": float(sb + half), "available": True})
        else:
            out["sigma_b"].append({
                "estimate": float(sb), "lower": None, "upper": None,
                "available": False})
    return out


def asymptotic_summary(components: FitComponents, fit: ModelFit
                       ) -> AsymptoticSummary:
    """Bundle the variance matrices for reporting."""
    obs = components.obs
    n = obs.n_obs
    nm = components.n_coeffs
    diagonal_only = nm > DENSE_COEFF_LIMIT
    vf = var_field(components, fit, diagonal_only=diagonal_only)
    vb = var_beta(components, fit) if obs.n_fixed else np.zeros((0, 0))
    info = info_matrix_sigma(components, fit)
    omega = None
    xi = None
    if not diagonal_only:
        _, hq, gram, _ = _field_workspace(components, fit)
        omega = np.linalg.inv(gram)  # Omega_n = n (B'QB)^-1
        if obs.n_fixed:
            xi = (obs.X.T @ hq.whitened_x) / n
    return AsymptoticSummary(var_field=vf, var_field_is_diagonal=diagonal_only,
                             var_beta=vb, info_sigma=info, omega=omega, xi=xi)


def inference_report(components: FitComponents, fit: ModelFit,
                     level: float = 0.99) -> str:
    """JSON-shaped text report: coefficient and variance-component CIs."""
    obs = components.obs
    z = float(norm.ppf(0.5 * (1.0 + level)))
    report: dict = {"level": level, "beta": [],
                    "variance_components": variance_component_ci(
                        components, fit, level)}
    if obs.n_fixed:
        vb = var_beta(components, fit)
        for j in range(obs.n_fixed):
            se = float(np.sqrt(max(vb[j, j], 0.0)))
            est = float(fit.beta[j])
            report["beta"].append({
                "coefficient": f"x{j + 1}", "estimate": est,
                "std_error": se, "lower": est - z * se,
                "upper": est + z * se})
    return json.dumps(report, indent=2)
