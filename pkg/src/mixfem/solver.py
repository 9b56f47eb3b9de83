"""Outer estimation loop: penalized GLS solve alternating with EM updates.

Each iteration (1) solves the penalized weighted least-squares problem for
the fixed effects and field coefficients in closed form at the current
error covariance, (2) predicts the group effects from the ridge-augmented
least-squares problem, (3) applies one EM update to the relative precision
matrix D = Sigma_b / sigma^2, and (4) re-profiles the noise scale from the
augmented residual.

The recorded penalized log-likelihood measures the penalty in whitened
units and profiles the noise scale out.  With the EM step run at the
profile-consistent scale (augmented residual mean square plus the current
penalty value), every update is exact coordinate ascent on that trace, so
it is nondecreasing by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .covariance import CovarianceError, ErrorCovariance, HatOperators, build_H_Q
from .data import ObservationSet
from .mesh import PdeCoefficients, TriangularMesh, assemble_mass, \
    assemble_operator, spatial_eval_matrix
from .penalty import PenaltySystem, assemble_penalty
from .splines import SplineBasis, assemble_curvature_penalty, \
    assemble_time_mass, eval_basis
from .data import build_B

DEFAULT_ALPHA = 3.0 / 8.0
VARIANCE_FLOOR = 1e-10
_ZERO_SCALE_REL = 1e-24


class SolverError(RuntimeError):
    """Numerical failure inside the estimation loop."""


@dataclass
class FitOptions:
    """Tunable knobs of the outer loop."""

    tol: float = 1e-6
    max_iter: int = 50
    alpha_init: float = DEFAULT_ALPHA
    variance_floor: float = VARIANCE_FLOOR


@dataclass(frozen=True)
class ModelFit:
    """Converged (or best-effort) estimate of all model components."""

    beta: np.ndarray  # (q,)
    field_coeffs: np.ndarray  # (N M,), time-major
    sigma_b: np.ndarray  # (p, p) random-effect covariance
    sigma2: float
    rel_precision: np.ndarray  # (p, p) D = sigma_b / sigma2
    rel_precision_factor: np.ndarray  # (p, p) upper Delta, D^-1 = Delta' Delta
    random_effects: np.ndarray  # (g, p) predicted group effects
    lambda_space: float
    lambda_time: float
    n_iter: int
    loglik_trace: tuple
    converged: bool
    degenerate: bool = False
    regularized: bool = False
    edf: float | None = None
    gcv: float | None = None


@dataclass(frozen=True)
class FitComponents:
    """Per-problem matrices that do not depend on the smoothing level."""

    obs: ObservationSet
    mesh: TriangularMesh
    basis: SplineBasis
    pde: PdeCoefficients
    B: sp.csr_matrix = field(repr=False)
    space_mass: sp.csr_matrix = field(repr=False)
    space_operator: sp.csr_matrix = field(repr=False)
    time_mass: np.ndarray = field(repr=False)
    time_curvature: np.ndarray = field(repr=False)
    base_gram: np.ndarray = field(repr=False)  # dense B'B

    @property
    def n_coeffs(self) -> int:
        return self.B.shape[1]

    def penalty_system(self, lambda_space: float,
                       lambda_time: float) -> PenaltySystem:
        return assemble_penalty(self.space_mass, self.space_operator,
                                self.time_mass, self.time_curvature,
                                lambda_space, lambda_time)


def build_components(obs: ObservationSet, mesh: TriangularMesh,
                     basis: SplineBasis,
                     pde: PdeCoefficients) -> FitComponents:
    """Assemble bases, design, and Gram matrices shared across lambdas."""
    psi = spatial_eval_matrix(mesh, obs.locations)
    phi = eval_basis(basis, obs.times)
    b = build_B(obs, psi, phi)
    return FitComponents(
        obs=obs, mesh=mesh, basis=basis, pde=pde, B=b,
        space_mass=assemble_mass(mesh),
        space_operator=assemble_operator(mesh, pde),
        time_mass=assemble_time_mass(basis),
        time_curvature=assemble_curvature_penalty(basis),
        base_gram=(b.T @ b).toarray())


# -- individual steps -------------------------------------------------------


def fixed_effects_step(obs: ObservationSet, b: sp.spmatrix,
                       system: PenaltySystem, cov: ErrorCovariance):
    """Closed-form minimizer of the whitened penalized least squares.

    Returns (beta, field_coeffs); beta is empty for q = 0.
    """
    hq = build_H_Q(cov)
    return _fixed_effects(hq, sp.csr_matrix(b), system.penalty_dense(),
                          None, obs.y)


def _fixed_effects(hq: HatOperators, b: sp.csr_matrix, pen_dense: np.ndarray,
                   base_gram: np.ndarray | None, y: np.ndarray):
    n_obs = y.size
    rhs = b.T @ hq.apply_q(y) / n_obs
    gram = hq.gram_bqb(b, base_gram) / n_obs
    system = gram + pen_dense
    try:
        chol = sla.cho_factor(system, lower=True, overwrite_a=True)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"singular penalized system matrix: {exc}") from exc
    f = sla.cho_solve(chol, rhs)
    if hq.n_fixed:
        beta = hq.gls_gram_solve(hq.whitened_x.T @ (y - b @ f))
    else:
        beta = np.zeros(0)
    return beta, f


def predict_random_effects(obs: ObservationSet, b: sp.spmatrix,
                           beta: np.ndarray, field_coeffs: np.ndarray,
                           delta: np.ndarray):
    """Ridge-shrunk group effects via QR of the augmented design.

    Appending the rows of ``delta`` to each Z_k turns the shrinkage prior
    into ordinary least squares on zero pseudo-observations.  Returns the
    (g, p) prediction matrix and the per-group triangular factors.
    """
    delta = np.asarray(delta, dtype=float)
    p = obs.n_random
    if delta.shape != (p, p):
        raise SolverError(f"delta must be ({p}, {p})")
    resid = _data_residual(obs, b, beta, field_coeffs)
    b_hat = np.empty((obs.n_groups, p))
    r_factors = []
    for k in range(obs.n_groups):
        sl = obs.group_slice(k)
        zk_aug = np.vstack([obs.Z[sl], delta])
        q_mat, r_mat = np.linalg.qr(zk_aug)
        if (np.abs(np.diag(r_mat)) < 1e-300).any():
            raise SolverError(f"rank-deficient augmented design in group {k}")
        rhs = q_mat[:sl.stop - sl.start].T @ resid[sl]
        b_hat[k] = sla.solve_triangular(r_mat, rhs, lower=False)
        r_factors.append(r_mat)
    return b_hat, r_factors


def em_step(b_hat: np.ndarray, r_factors: Sequence[np.ndarray], sigma: float,
            n_groups: int) -> np.ndarray:
    """One EM update of the relative precision matrix.

    Stacks the scaled predictions and inverse triangular factors into the
    matrix L, takes the triangular factor A of its QR decomposition (so
    A A' = L'L), and returns A A' / g.
    """
    if sigma <= 0:
        raise SolverError("sigma must be > 0 for the EM update")
    p = b_hat.shape[1]
    rows = []
    for k in range(n_groups):
        r_inv = sla.solve_triangular(r_factors[k], np.eye(p), lower=False)
        rows.append(b_hat[k][None, :] / sigma)
        rows.append(r_inv.T)
    l_mat = np.vstack(rows)
    a_factor = np.linalg.qr(l_mat, mode="r").T
    d_new = a_factor @ a_factor.T / n_groups
    return 0.5 * (d_new + d_new.T)


def update_sigma2(obs: ObservationSet, b: sp.spmatrix, beta: np.ndarray,
                  field_coeffs: np.ndarray, b_hat: np.ndarray,
                  delta: np.ndarray) -> float:
    """Profiled noise variance from the augmented residual sum of squares."""
    resid = _data_residual(obs, b, beta, field_coeffs)
    total = 0.0
    for k in range(obs.n_groups):
        sl = obs.group_slice(k)
        rk = resid[sl] - obs.Z[sl] @ b_hat[k]
        total += rk @ rk + b_hat[k] @ (delta.T @ delta) @ b_hat[k]
    return float(total / obs.n_obs)


def init_delta(obs: ObservationSet, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Diagonal starting value for the relative precision factor.

    Entry j is alpha * sqrt(mean over groups of ||j-th Z column||^2); the
    guard rejects alpha <= 0 and all-zero covariate columns, either of
    which would make the factor singular.
    """
    if alpha <= 0:
        raise SolverError("alpha must be > 0 (zero factor is singular)")
    col_norms = np.zeros(obs.n_random)
    for k in range(obs.n_groups):
        zk = obs.Z[obs.group_slice(k)]
        col_norms += (zk ** 2).sum(axis=0)
    if (col_norms <= 0).any():
        j = int(np.argmax(col_norms <= 0))
        raise SolverError(f"random-effect column {j} is identically zero")
    return np.diag(alpha * np.sqrt(col_norms / obs.n_groups))


def penalized_loglik(obs: ObservationSet, b: sp.spmatrix,
                     penalty: sp.spmatrix, cov: ErrorCovariance,
                     beta: np.ndarray, field_coeffs: np.ndarray) -> float:
    """Per-observation penalized log-likelihood, noise scale profiled out.

    With J = (1/n) r' Sigma_e^-1 r + f' P f (the objective the fixed-effects
    step minimizes) the profiled value is
    -(1/2) (1 + log(2 pi J)) - log det(Sigma_e) / (2 n).  Evaluated at the
    profiling scale sigma^2 = J, this is the penalized Gaussian
    log-likelihood with the penalty measured in whitened units.
    """
    resid = _data_residual(obs, b, beta, field_coeffs)
    n = obs.n_obs
    pen_val = max(float(field_coeffs @ (penalty @ field_coeffs)), 0.0)
    j_val = max(cov.quad_form_inverse(resid) / n + pen_val, 1e-300)
    return float(-0.5 * (1.0 + math.log(2.0 * math.pi * j_val))
                 - cov.logdet() / (2.0 * n))


def _data_residual(obs, b, beta, field_coeffs):
    resid = obs.y - b @ field_coeffs
    if beta.size:
        resid = resid - obs.X @ beta
    return resid


def _upper_cholesky_factor(d: np.ndarray) -> np.ndarray:
    """Upper-triangular Delta with Delta' Delta = D^-1."""
    p = d.shape[0]
    try:
        d_inv = sla.cho_solve(sla.cho_factor(d, lower=True), np.eye(p))
        d_inv = 0.5 * (d_inv + d_inv.T)
        return np.linalg.cholesky(d_inv).T
    except np.linalg.LinAlgError as exc:
        raise SolverError(
            f"relative precision matrix is not positive definite: {exc}"
        ) from exc


# -- outer loop --------------------------------------------------------------


def fit_components(components: FitComponents, lambda_space: float,
                   lambda_time: float, options: FitOptions | None = None,
                   start_rel_precision: np.ndarray | None = None) -> ModelFit:
    """Run the outer loop on preassembled components."""
    opts = options or FitOptions()
    obs = components.obs
    b = components.B
    system = components.penalty_system(lambda_space, lambda_time)
    pen_sparse = system.penalty
    pen_dense = system.penalty_dense()
    y = obs.y
    n = obs.n_obs

    if start_rel_precision is not None:
        d_mat = np.array(start_rel_precision, dtype=float)
        delta = _upper_cholesky_factor(d_mat)
    else:
        delta = init_delta(obs, opts.alpha_init)
        d_mat = np.linalg.inv(delta.T @ delta)

    trace: list[float] = []
    beta = np.zeros(obs.n_fixed)
    f = np.zeros(components.n_coeffs)
    b_hat = np.zeros((obs.n_groups, obs.n_random))
    sigma2 = float(np.var(y))
    converged = False
    degenerate = False
    regularized = False
    prev_params = None
    n_iter = 0

    for n_iter in range(1, opts.max_iter + 1):
        try:
            cov = ErrorCovariance(obs, d_mat)
        except CovarianceError as exc:
            raise SolverError(f"covariance build failed: {exc}") from exc
        regularized |= cov.regularized
        hq = build_H_Q(cov)
        beta, f = _fixed_effects(hq, b, pen_dense, components.base_gram, y)
        # the penalty form is PSD: negative values are pure rounding and
        # must not drag the EM scale below the augmented residual
        pen_val = max(float(f @ (pen_sparse @ f)), 0.0)

        # EM update at the profile-consistent noise scale: the augmented
        # mean-square residual at the current factor plus the penalty value.
        # This makes the recorded trace exact coordinate ascent.
        b_hat_e, r_factors = predict_random_effects(obs, b, beta, f, delta)
        scale_mid = max(update_sigma2(obs, b, beta, f, b_hat_e, delta)
                        + pen_val, 1e-300)
        d_new = em_step(b_hat_e, r_factors, math.sqrt(scale_mid),
                        obs.n_groups)
        floor = opts.variance_floor
        low = np.diag(d_new) < floor
        if low.any():
            d_new = d_new.copy()
            d_new[np.diag_indices_from(d_new)] = np.maximum(
                np.diag(d_new), floor)
            degenerate = True
        delta_new = _upper_cholesky_factor(d_new)
        b_hat, _ = predict_random_effects(obs, b, beta, f, delta_new)
        sigma2_new = max(update_sigma2(obs, b, beta, f, b_hat, delta_new),
                         0.0)

        # profiled trace value; sigma2_new equals quad(d_new)/n by the
        # ridge-residual identity, so j_val = sigma2_new + pen_val
        j_val = max(sigma2_new + pen_val, 1e-300)
        cov_new = ErrorCovariance(obs, d_new)
        ll = float(-0.5 * (1.0 + math.log(2.0 * math.pi * j_val))
                   - cov_new.logdet() / (2.0 * n))
        trace.append(ll)
        d_mat, delta, sigma2 = d_new, delta_new, sigma2_new

        if sigma2_new <= _ZERO_SCALE_REL * max(1.0, float(np.abs(y).max())) ** 2:
            # the model interpolates the data: the noise variance is zero to
            # machine precision and further EM steps would only amplify
            # rounding noise in the predicted effects
            degenerate = True
            converged = True
            break

        # parameter changes are measured against their block scale so a
        # variance component drifting to the boundary still converges
        params = (beta.copy(), np.concatenate([[sigma2_new],
                                               np.diag(sigma2_new * d_new)]))
        if prev_params is not None:
            rel_ll = abs(ll - trace[-2]) / max(1.0, abs(ll))
            rel_par = 0.0
            for cur, prev in zip(params, prev_params):
                if cur.size:
                    scale = max(float(np.abs(prev).max()), 1e-12)
                    rel_par = max(rel_par,
                                  float(np.abs(cur - prev).max()) / scale)
            if rel_ll < opts.tol and rel_par < opts.tol:
                converged = True
        prev_params = params
        if converged:
            break

    return ModelFit(
        beta=beta, field_coeffs=f, sigma_b=sigma2 * d_mat, sigma2=sigma2,
        rel_precision=d_mat, rel_precision_factor=delta,
        random_effects=b_hat, lambda_space=float(lambda_space),
        lambda_time=float(lambda_time), n_iter=n_iter,
        loglik_trace=tuple(trace), converged=converged,
        degenerate=degenerate, regularized=regularized)


def fpirls_fit(obs: ObservationSet, mesh: TriangularMesh, basis: SplineBasis,
               pde: PdeCoefficients, lambda_space: float, lambda_time: float,
               options: FitOptions | None = None) -> ModelFit:
    """Fit the full model from raw ingredients (assembles everything)."""
    components = build_components(obs, mesh, basis, pde)
    return fit_components(components, lambda_space, lambda_time, options)


def attach_scores(fit: ModelFit, edf: float, gcv: float) -> ModelFit:
    return replace(fit, edf=edf, gcv=gcv)
