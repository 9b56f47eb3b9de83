"""Block error covariance, Woodbury inverse actions, and the H/Q operators.

With relative precision D = Sigma_b / sigma^2, the marginal error
covariance factors as sigma^2 * Sigma_e with per-group blocks
Sigma_{e,k} = Z_k D Z_k' + I.  Every inverse action goes through the
Woodbury identity: only the p x p inner matrices D^-1 + Z_k' Z_k are
factorized, so applying Sigma_e^-1 costs O(n_obs p + g p^3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .data import ObservationSet

INNER_RIDGE_REL = 1e-12
DENSE_OBS_LIMIT = 5000


class CovarianceError(ValueError):
    """Degenerate covariance input."""


class ErrorCovariance:
    """Woodbury-form handle on Sigma_e for a fixed relative precision D.

    Parameters
    ----------
    obs : observation set supplying Z and the group layout.
    rel_precision : (p, p) SPD matrix D = Sigma_b / sigma^2.

    Near-singular D triggers a relative ridge on the inner matrices and is
    reported through ``regularized``.
    """

    def __init__(self, obs: ObservationSet, rel_precision: np.ndarray):
        d = np.asarray(rel_precision, dtype=float)
        p = obs.n_random
        if d.shape != (p, p):
            raise CovarianceError(f"rel_precision must be ({p}, {p})")
        if not np.allclose(d, d.T, atol=1e-10 * max(1.0, np.abs(d).max())):
            raise CovarianceError("rel_precision must be symmetric")
        self.obs = obs
        self.rel_precision = 0.5 * (d + d.T)
        self.regularized = False

        try:
            d_chol = sla.cho_factor(self.rel_precision, lower=True)
            d_inv = sla.cho_solve(d_chol, np.eye(p))
            self._logdet_d = 2.0 * np.log(np.diag(d_chol[0])).sum()
        except np.linalg.LinAlgError as exc:
            raise CovarianceError(f"rel_precision is not SPD: {exc}") from exc
        d_inv = 0.5 * (d_inv + d_inv.T)

        self._inner_chol = []
        self._logdet_inner = []
        for k in range(obs.n_groups):
            zk = obs.Z[obs.group_slice(k)]
            inner = d_inv + zk.T @ zk
            chol = self._factor_inner(inner, p)
            self._inner_chol.append(chol)
            self._logdet_inner.append(2.0 * np.log(np.diag(chol[0])).sum())

    def _factor_inner(self, inner, p):
        try:
            return sla.cho_factor(inner, lower=True)
        except np.linalg.LinAlgError:
            self.regularized = True
            ridge = INNER_RIDGE_REL * np.trace(inner) / p
            for _ in range(3):
                try:
                    return sla.cho_factor(inner + ridge * np.eye(p),
                                          lower=True)
                except np.linalg.LinAlgError:
                    ridge *= 1e3
            raise CovarianceError("singular Woodbury inner matrix")

    # -- inverse actions ---------------------------------------------------

    def apply_inverse(self, v: np.ndarray) -> np.ndarray:
        """Sigma_e^-1 v for a vector or a (n_obs, k) matrix."""
        v = np.asarray(v, dtype=float)
        out = v.copy()
        for k in range(self.obs.n_groups):
            sl = self.obs.group_slice(k)
            zk = self.obs.Z[sl]
            zv = zk.T @ v[sl]
            out[sl] -= zk @ sla.cho_solve(self._inner_chol[k], zv)
        return out

    def quad_form_inverse(self, v: np.ndarray) -> float:
        """v' Sigma_e^-1 v."""
        return float(np.asarray(v) @ self.apply_inverse(v))

    def logdet(self) -> float:
        """log det Sigma_e via det(I + Z D Z') = det(D) det(D^-1 + Z'Z)."""
        g = self.obs.n_groups
        return float(g * self._logdet_d + np.sum(self._logdet_inner))

    def corrected_gram(self, b: sp.spmatrix, base_gram: np.ndarray | None = None
                       ) -> np.ndarray:
        """Dense B' Sigma_e^-1 B.

        ``base_gram`` may supply a precomputed dense B'B (it does not
        depend on D, so callers in iterative loops reuse it).
        """
        b = sp.csr_matrix(b)
        if base_gram is None:
            base_gram = (b.T @ b).toarray()
        out = np.array(base_gram, dtype=float, copy=True)
        rows = []
        for k in range(self.obs.n_groups):
            sl = self.obs.group_slice(k)
            u = (b[sl].T @ self.obs.Z[sl]).T  # (p, NM) dense
            rows.append(sla.solve_triangular(self._inner_chol[k][0], u,
                                             lower=True))
        v = np.vstack(rows)  # (g p, NM): one rank-(g p) downdate
        out -= v.T @ v
        return out

    def dense_sigma_e(self) -> np.ndarray:
        """Explicit Sigma_e; test/diagnostic use only at desk scale."""
        n = self.obs.n_obs
        if n > DENSE_OBS_LIMIT:
            raise CovarianceError(
                f"refusing to build dense covariance for n_obs={n}")
        out = np.eye(n)
        for k in range(self.obs.n_groups):
            sl = self.obs.group_slice(k)
            zk = self.obs.Z[sl]
            out[sl, sl.start:sl.stop] += zk @ self.rel_precision @ zk.T
        return out


@dataclass(frozen=True)
class HatOperators:
    """Projection onto the fixed-effect span and its annihilator.

    ``apply_q`` realizes Q = Sigma_e^-1 (I - H) with
    H = X (X' Sigma_e^-1 X)^-1 X' Sigma_e^-1; for q = 0 the projection is
    empty and Q = Sigma_e^-1.
    """

    cov: ErrorCovariance
    whitened_x: np.ndarray = field(repr=False)  # Sigma_e^-1 X, (n_obs, q)
    gram_chol: object = field(repr=False)  # Cholesky of X' Sigma_e^-1 X

    @property
    def n_fixed(self) -> int:
        return self.whitened_x.shape[1]

    def gls_gram_solve(self, rhs: np.ndarray) -> np.ndarray:
        """(X' Sigma_e^-1 X)^-1 rhs."""
        if self.n_fixed == 0:
            raise CovarianceError("no fixed effects to solve for")
        return sla.cho_solve(self.gram_chol, rhs)

    def apply_h(self, v: np.ndarray) -> np.ndarray:
        if self.n_fixed == 0:
            return np.zeros_like(np.asarray(v, dtype=float))
        xs = self.whitened_x.T @ v
        return self.cov.obs.X @ self.gls_gram_solve(xs)

    def apply_q(self, v: np.ndarray) -> np.ndarray:
        sv = self.cov.apply_inverse(v)
        if self.n_fixed == 0:
            return sv
        xs = self.whitened_x.T @ v
        return sv - self.whitened_x @ self.gls_gram_solve(xs)

    def gram_bqb(self, b: sp.spmatrix, base_gram: np.ndarray | None = None
                 ) -> np.ndarray:
        """Dense B' Q B as B' Sigma_e^-1 B minus a rank-q correction."""
        out = self.cov.corrected_gram(b, base_gram)
        if self.n_fixed:
            bw = b.T @ self.whitened_x  # (NM, q)
            out -= bw @ self.gls_gram_solve(bw.T)
        return out

    def dense_h(self) -> np.ndarray:
        n = self.cov.obs.n_obs
        if n > DENSE_OBS_LIMIT:
            raise CovarianceError(f"refusing dense H for n_obs={n}")
        if self.n_fixed == 0:
            return np.zeros((n, n))
        return self.cov.obs.X @ self.gls_gram_solve(self.whitened_x.T)

    def dense_q(self) -> np.ndarray:
        n = self.cov.obs.n_obs
        if n > DENSE_OBS_LIMIT:
            raise CovarianceError(f"refusing dense Q for n_obs={n}")
        return self.apply_q(np.eye(n))


def build_H_Q(cov: ErrorCovariance, x: np.ndarray | None = None) -> HatOperators:
    """Hat and annihilator operators for the fixed-effect design.

    ``x`` defaults to the observation set's design matrix; passing a
    zero-column matrix gives the q = 0 case H = 0, Q = Sigma_e^-1.
    """
    if x is None:
        x = cov.obs.X
    x = np.asarray(x, dtype=float)
    q = x.shape[1] if x.ndim == 2 else 0
    if q == 0:
        return HatOperators(cov=cov, whitened_x=np.zeros((cov.obs.n_obs, 0)),
                            gram_chol=None)
    wx = cov.apply_inverse(x)
    gram = x.T @ wx
    try:
        chol = sla.cho_factor(0.5 * (gram + gram.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(
            f"rank-deficient whitened design X' Sigma_e^-1 X: {exc}") from exc
    return HatOperators(cov=cov, whitened_x=wx, gram_chol=chol)
