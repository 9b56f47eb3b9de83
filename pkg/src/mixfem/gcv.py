"""Smoothing-parameter selection by generalized cross-validation.

The score uses whitened residuals and the trace of the whitened-space
smoother, consistent with the objective the inner solver minimizes:

    edf = q + tr( ((1/n) B'QB + P)^-1 (1/n) B'QB )
    gcv = n * r' Sigma_e^-1 r / (n - edf)^2

Grid points are independent fits warm-started from a common pilot fit, so
parallel scans return the same result at any worker count.  Ties on the
score go to the smaller space lambda, then the smaller time lambda.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .covariance import ErrorCovariance, build_H_Q
from .mesh import PdeCoefficients
from .solver import (
    FitComponents,
    FitOptions,
    ModelFit,
    SolverError,
    attach_scores,
    fit_components,
)
from .utils import parallel_map


SATURATION_MARGIN = 1e-6


class GcvError(RuntimeError):
    """Unusable generalized cross-validation score."""


def default_lambda_grid(n_points: int = 5) -> np.ndarray:
    """Log-spaced default grid over [1e-6, 1]."""
    return np.logspace(-6.0, 0.0, n_points)


@dataclass(frozen=True)
class GcvScan:
    """Scores over a (lambda_space, lambda_time) grid."""

    pairs: tuple  # ((lambda_space, lambda_time), ...) in lexicographic order
    scores: np.ndarray
    edfs: np.ndarray
    best_index: int

    @property
    def best_pair(self) -> tuple:
        return self.pairs[self.best_index]

    def as_rows(self):
        """Rows (lambda_D, lambda_T, gcv, edf) for the scan CSV."""
        for (ls, lt), score, edf in zip(self.pairs, self.scores, self.edfs):
            yield ls, lt, score, edf


def gcv_score(components: FitComponents, fit: ModelFit) -> tuple[float, float]:
    """Score and effective degrees of freedom of a converged fit."""
    obs = components.obs
    n = obs.n_obs
    cov = ErrorCovariance(obs, fit.rel_precision)
    hq = build_H_Q(cov)
    system = components.penalty_system(fit.lambda_space, fit.lambda_time)

    gram = hq.gram_bqb(components.B, components.base_gram) / n
    t_mat = gram + system.penalty_dense()
    try:
        chol = sla.cho_factor(t_mat, lower=True, overwrite_a=True)
    except np.linalg.LinAlgError as exc:
        raise GcvError(f"singular smoother system: {exc}") from exc
    edf = float(obs.n_fixed + np.trace(sla.cho_solve(chol, gram)))

    if edf >= n * (1.0 - SATURATION_MARGIN):
        raise GcvError(
            f"oversaturated model: edf {edf:.4f} of n_obs {n}")
    resid = obs.y - components.B @ fit.field_coeffs
    if fit.beta.size:
        resid = resid - obs.X @ fit.beta
    score = float(n * cov.quad_form_inverse(resid) / (n - edf) ** 2)
    if not np.isfinite(score):
        raise GcvError("non-finite generalized cross-validation score")
    return score, edf


def gcv_select(components: FitComponents, lambda_space_grid,
               lambda_time_grid, options: FitOptions | None = None,
               threads: int = 1) -> tuple[GcvScan, ModelFit]:
    """Fit every grid pair and return the scan plus the best fit.

    A pilot fit at the first pair supplies the warm start shared by all
    pairs (a shared start keeps results identical across thread counts).
    Pairs whose fit or score fails get an infinite score; if every pair
    fails, the first failure is re-raised.
    """
    ls_grid = np.atleast_1d(np.asarray(lambda_space_grid, dtype=float))
    lt_grid = np.atleast_1d(np.asarray(lambda_time_grid, dtype=float))
    if ls_grid.size == 0 or lt_grid.size == 0:
        raise GcvError("empty smoothing-parameter grid")
    pairs = [(ls, lt) for ls in np.sort(ls_grid) for lt in np.sort(lt_grid)]

    pilot = fit_components(components, *pairs[0], options)
    warm = pilot.rel_precision

    def run(pair):
        try:
            fit = fit_components(components, pair[0], pair[1], options,
                                 start_rel_precision=warm)
            score, edf = gcv_score(components, fit)
            return attach_scores(fit, edf=edf, gcv=score), None
        except (SolverError, GcvError) as exc:
            return None, exc

    results = parallel_map(run, pairs, threads=threads)
    scores = np.array([np.inf if fit is None else fit.gcv
                       for fit, _ in results])
    edfs = np.array([np.nan if fit is None else fit.edf
                     for fit, _ in results])
    if not np.isfinite(scores).any():
        raise GcvError(
            f"all grid pairs failed; first failure: {results[0][1]}")
    best = int(np.argmin(scores))  # lexicographic pair order breaks ties
    scan = GcvScan(pairs=tuple(pairs), scores=scores, edfs=edfs,
                   best_index=best)
    return scan, results[best][0]


def pde_hyperparameter_scan(components_for, candidates,
                            lambda_space_grid, lambda_time_grid,
                            options: FitOptions | None = None,
                            threads: int = 1):
    """Grid search over operator hyperparameters.

    ``components_for`` maps a candidate :class:`PdeCoefficients` to fit
    components (rebuilding the operator matrix); each candidate is scored
    by its best generalized cross-validation value over the lambda grid
    and the lowest one wins (ties go to the earlier candidate).

    Returns (winning coefficients, winning index, scans, best fits) so
    callers can emit the full comparison.
    """
    candidates = list(candidates)
    if not candidates:
        raise GcvError("no candidate operator coefficients")
    scans = []
    fits = []
    best_scores = []
    for pde in candidates:
        if not isinstance(pde, PdeCoefficients):
            raise GcvError("candidates must be PdeCoefficients")
        comps = components_for(pde)
        scan, fit = gcv_select(comps, lambda_space_grid, lambda_time_grid,
                               options, threads=threads)
        scans.append(scan)
        fits.append(fit)
        best_scores.append(scan.scores[scan.best_index])
    best = int(np.argmin(best_scores))
    return candidates[best], best, scans, fits
