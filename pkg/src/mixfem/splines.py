"""Cubic B-spline basis on [0, T]: evaluation, mass, and curvature penalty.

Clamped uniform knots by default.  Temporal matrices are integrated with
piecewise Gauss-Legendre rules chosen exact for the integrand degree:
4 points per span for the basis product (degree 6), 2 points for the
product of second derivatives (piecewise degree 2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


class SplineError(ValueError):
    """Invalid spline basis or evaluation point."""


@dataclass(frozen=True)
class SplineBasis:
    """Clamped cubic B-spline basis with ``n_basis`` functions on [0, t_max]."""

    knots: np.ndarray
    t_max: float
    degree: int = 3

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1


def cubic_spline_basis(n_basis: int, t_max: float = 1.0) -> SplineBasis:
    """Uniform clamped basis; needs at least degree + 1 = 4 functions."""
    degree = 3
    if n_basis < degree + 1:
        raise SplineError(f"n_basis must be >= {degree + 1}, got {n_basis}")
    if t_max <= 0:
        raise SplineError("t_max must be > 0")
    breaks = np.linspace(0.0, t_max, n_basis - degree + 1)
    knots = np.concatenate([
        np.zeros(degree), breaks, np.full(degree, t_max)])
    knots.setflags(write=False)
    return SplineBasis(knots=knots, t_max=float(t_max), degree=degree)


def eval_basis(basis: SplineBasis, times, derivative: int = 0) -> np.ndarray:
    """Dense (len(times), n_basis) matrix of basis values or derivatives.

    Times must lie within [0, t_max]; rows of the value matrix sum to 1.
    """
    times = np.ascontiguousarray(np.atleast_1d(np.asarray(times, dtype=float)))
    if (times < 0).any() or (times > basis.t_max).any():
        bad = times[(times < 0) | (times > basis.t_max)][0]
        raise SplineError(f"time {bad} outside [0, {basis.t_max}]")
    return kernels.bspline_design(basis.knots, basis.degree, times,
                                  derivative)


def greville_points(basis: SplineBasis) -> np.ndarray:
    """Knot averages; coefficients a + b * greville reproduce a + b * t."""
    d = basis.degree
    k = basis.knots
    return np.array([k[i + 1:i + d + 1].mean() for i in range(basis.n_basis)])


def _spans(basis: SplineBasis) -> np.ndarray:
    uniq = np.unique(basis.knots)
    return np.column_stack([uniq[:-1], uniq[1:]])


def _gauss_gram(basis: SplineBasis, n_points: int, derivative: int) -> np.ndarray:
    nodes, weights = np.polynomial.legendre.leggauss(n_points)
    m = basis.n_basis
    out = np.zeros((m, m))
    for lo, hi in _spans(basis):
        half = 0.5 * (hi - lo)
        x = lo + half * (nodes + 1.0)
        vals = eval_basis(basis, x, derivative)
        out += (vals * (weights * half)[:, None]).T @ vals
    return out


def assemble_time_mass(basis: SplineBasis) -> np.ndarray:
    """Gram matrix of the basis; SPD, entries sum to t_max."""
    return _gauss_gram(basis, 4, 0)


def assemble_curvature_penalty(basis: SplineBasis) -> np.ndarray:
    """Gram matrix of second derivatives; PSD with rank n_basis - 2.

    Its null space is spanned by coefficient vectors of globally linear
    functions.
    """
    return _gauss_gram(basis, 2, 2)
