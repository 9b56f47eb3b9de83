import numpy as np
import pytest
import scipy.sparse as sp

from mixfem.covariance import (
    CovarianceError,
    ErrorCovariance,
    build_H_Q,
)
from mixfem.data import build_observation_set


def random_obs(rng, n_loc=6, n_time=5, g=3, p=2, q=2):
    locations = rng.random((n_loc, 2))
    times = np.linspace(0, 1, n_time)
    li, ti, gl = [], [], []
    groups = [f"g{k}" for k in range(g)]
    for i in range(n_loc):
        for j in range(n_time):
            li.append(i)
            ti.append(j)
            gl.append(groups[(i * n_time + j) % g])
    k = len(li)
    X = rng.normal(size=(k, q)) if q else np.zeros((k, 0))
    Z = np.column_stack([np.ones(k)] + [rng.normal(size=k)
                                        for _ in range(p - 1)])
    return build_observation_set(locations, times, li, ti, gl,
                                 rng.normal(size=k), X, Z)


def random_spd(rng, p, scale=1.0):
    a = rng.normal(size=(p, p))
    return scale * (a @ a.T + p * np.eye(p))


class TestWoodbury:
    def test_two_by_two_block_known_inverse(self):
        # p=1, Z_k = ones, two records per group, D = 1:
        # the block is [[2, 1], [1, 2]]
        rng = np.random.default_rng(0)
        locations = rng.random((2, 2))
        obs = build_observation_set(
            locations, [0.0, 1.0], [0, 1, 0, 1], [0, 0, 1, 1],
            ["a", "a", "b", "b"], rng.normal(size=4),
            np.zeros((4, 0)), np.ones((4, 1)))
        cov = ErrorCovariance(obs, np.array([[1.0]]))
        block = np.array([[2.0, 1.0], [1.0, 2.0]])
        dense = cov.dense_sigma_e()
        assert np.allclose(dense[:2, :2], block)
        v = rng.normal(size=4)
        assert np.allclose(cov.apply_inverse(v),
                           np.linalg.solve(dense, v), atol=1e-12)

    def test_identity_limit_for_tiny_d(self):
        rng = np.random.default_rng(1)
        obs = random_obs(rng, p=1)
        cov = ErrorCovariance(obs, np.array([[1e-300]]))
        v = rng.normal(size=obs.n_obs)
        assert np.allclose(cov.apply_inverse(v), v, atol=1e-8)

    def test_matches_dense_inverse_random_instances(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            p = rng.integers(1, 4)
            obs = random_obs(rng, p=p, g=int(rng.integers(2, 5)))
            cov = ErrorCovariance(obs, random_spd(rng, p, scale=0.5))
            dense = cov.dense_sigma_e()
            v = rng.normal(size=obs.n_obs)
            assert np.allclose(cov.apply_inverse(v),
                               np.linalg.solve(dense, v), atol=1e-10)

    def test_logdet_matches_dense(self):
        rng = np.random.default_rng(3)
        obs = random_obs(rng, p=2)
        cov = ErrorCovariance(obs, random_spd(rng, 2))
        _, ref = np.linalg.slogdet(cov.dense_sigma_e())
        assert np.isclose(cov.logdet(), ref, atol=1e-10)

    def test_corrected_gram_matches_dense(self):
        rng = np.random.default_rng(4)
        obs = random_obs(rng, p=2)
        cov = ErrorCovariance(obs, random_spd(rng, 2))
        b = sp.csr_matrix(rng.normal(size=(obs.n_obs, 7)))
        ref = b.toarray().T @ np.linalg.solve(cov.dense_sigma_e(),
                                              b.toarray())
        assert np.allclose(cov.corrected_gram(b), ref, atol=1e-10)

    def test_near_singular_d_is_regularized(self):
        rng = np.random.default_rng(5)
        obs = random_obs(rng, p=2)
        d = np.array([[1.0, 1.0], [1.0, 1.0]])  # singular
        with pytest.raises(CovarianceError):
            ErrorCovariance(obs, d)

    def test_asymmetric_d_rejected(self):
        rng = np.random.default_rng(6)
        obs = random_obs(rng, p=2)
        with pytest.raises(CovarianceError, match="symmetric"):
            ErrorCovariance(obs, np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_woodbury_apply_cost_sanity(self):
        # timed sanity check, not a tight bound: the low-rank inverse
        # action must beat a dense block solve comfortably at this size
        import time

        rng = np.random.default_rng(12)
        obs = random_obs(rng, n_loc=60, n_time=40, g=6, p=1, q=0)
        assert obs.n_obs == 2400
        cov = ErrorCovariance(obs, np.array([[0.7]]))
        v = rng.normal(size=obs.n_obs)

        t0 = time.perf_counter()
        for _ in range(5):
            out_fast = cov.apply_inverse(v)
        fast = (time.perf_counter() - t0) / 5

        dense = cov.dense_sigma_e()
        t0 = time.perf_counter()
        out_dense = np.linalg.solve(dense, v)
        slow = time.perf_counter() - t0

        assert np.allclose(out_fast, out_dense, atol=1e-9)
        assert fast < slow


class TestHatOperators:
    def test_q_zero_gives_sigma_inverse(self):
        rng = np.random.default_rng(7)
        obs = random_obs(rng, q=0, p=1)
        cov = ErrorCovariance(obs, np.array([[0.8]]))
        hq = build_H_Q(cov)
        v = rng.normal(size=obs.n_obs)
        assert np.allclose(hq.apply_h(v), 0.0)
        assert np.allclose(hq.apply_q(v), cov.apply_inverse(v))

    def test_identity_covariance_orthonormal_X(self):
        rng = np.random.default_rng(8)
        obs = random_obs(rng, p=1, q=2)
        # orthonormalize X by rebuilding the observation set
        qmat, _ = np.linalg.qr(obs.X)
        obs2 = build_observation_set(
            obs.locations, obs.times, obs.loc_idx, obs.time_idx,
            np.asarray(obs.group_labels)[obs.group_idx], obs.y, qmat, obs.Z)
        cov = ErrorCovariance(obs2, np.array([[1e-300]]))  # Sigma_e = I
        hq = build_H_Q(cov)
        h = hq.dense_h()
        assert np.allclose(h, obs2.X @ obs2.X.T, atol=1e-8)

    def test_dense_formulas_random_instance(self):
        rng = np.random.default_rng(9)
        obs = random_obs(rng, p=2, q=2)
        cov = ErrorCovariance(obs, random_spd(rng, 2, scale=0.3))
        hq = build_H_Q(cov)
        sig = cov.dense_sigma_e()
        sig_inv = np.linalg.inv(sig)
        x = obs.X
        h_ref = x @ np.linalg.solve(x.T @ sig_inv @ x, x.T @ sig_inv)
        q_ref = sig_inv @ (np.eye(obs.n_obs) - h_ref)
        assert np.allclose(hq.dense_h(), h_ref, atol=1e-9)
        assert np.allclose(hq.dense_q(), q_ref, atol=1e-9)

    def test_contract_identities(self):
        rng = np.random.default_rng(10)
        obs = random_obs(rng, p=1, q=2)
        cov = ErrorCovariance(obs, np.array([[0.6]]))
        hq = build_H_Q(cov)
        h = hq.dense_h()
        q = hq.dense_q()
        sig = cov.dense_sigma_e()
        assert np.allclose(h @ h, h, atol=1e-9)  # idempotent
        assert np.allclose(q @ obs.X, 0.0, atol=1e-9 * np.abs(obs.X).max())
        assert np.allclose(q @ sig @ q.T, q, atol=1e-8)
        assert np.allclose(q, q.T, atol=1e-9)

    def test_gram_bqb_matches_dense(self):
        rng = np.random.default_rng(11)
        obs = random_obs(rng, p=2, q=2)
        cov = ErrorCovariance(obs, random_spd(rng, 2, scale=0.4))
        hq = build_H_Q(cov)
        b = sp.csr_matrix(rng.normal(size=(obs.n_obs, 6)))
        ref = b.toarray().T @ hq.dense_q() @ b.toarray()
        assert np.allclose(hq.gram_bqb(b), ref, atol=1e-9)
