"""Pure NumPy/SciPy implementations of the hot kernels.

Selected at import time by :mod:`mixfem.kernels` when the compiled core is
unavailable (or when MIXFEM_PURE_PYTHON=1).  Function signatures and
semantics match ``_core.pyx`` exactly; agreement is asserted in the test
suite whenever both backends are importable.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import BSpline

_LOCATE_CHUNK = 512


def triangle_geometry(nodes: np.ndarray, triangles: np.ndarray):
    """Signed areas and P1 basis gradients for every triangle.

    Returns
    -------
    areas : (T,) signed areas (positive for counterclockwise vertices).
    grads : (T, 3, 2) gradient of the hat function attached to each vertex.
    """
    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    e1 = p1 - p0
    e2 = p2 - p0
    twice_area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    grads = np.empty((triangles.shape[0], 3, 2))
    # grad of hat_i is the rotated opposite edge / (2 * area)
    grads[:, 0, 0] = p1[:, 1] - p2[:, 1]
    grads[:, 0, 1] = p2[:, 0] - p1[:, 0]
    grads[:, 1, 0] = p2[:, 1] - p0[:, 1]
    grads[:, 1, 1] = p0[:, 0] - p2[:, 0]
    grads[:, 2, 0] = p0[:, 1] - p1[:, 1]
    grads[:, 2, 1] = p1[:, 0] - p0[:, 0]
    # degenerate triangles (validated by callers) would divide by zero
    with np.errstate(divide="ignore", invalid="ignore"):
        grads /= twice_area[:, None, None]
    return 0.5 * twice_area, grads


def mass_blocks(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Per-triangle 3x3 mass blocks: integral of hat_i * hat_j."""
    areas, _ = triangle_geometry(nodes, triangles)
    base = np.full((3, 3), 1.0 / 12.0)
    np.fill_diagonal(base, 1.0 / 6.0)
    return areas[:, None, None] * base[None, :, :]


def operator_blocks(nodes, triangles, diffusion, advection, reaction):
    """Per-triangle blocks of the elliptic operator's weak form.

    Parameters
    ----------
    diffusion : (T, 2, 2) tensor per triangle.
    advection : (T, 2) vector per triangle.
    reaction : (T,) scalar per triangle.

    Returns
    -------
    diff : (T, 3, 3)  area * grad_i . (K grad_j)
    adv : (T, 3, 3)   integral of hat_i * (advection . grad_j); rows equal.
    reac : (T, 3, 3)  reaction * mass block.
    """
    areas, grads = triangle_geometry(nodes, triangles)
    kg = np.einsum("tab,tjb->tja", diffusion, grads)
    diff = areas[:, None, None] * np.einsum("tia,tja->tij", grads, kg)
    gdot = np.einsum("ta,tja->tj", advection, grads)
    adv = np.repeat((areas[:, None] / 3.0 * gdot)[:, None, :], 3, axis=1)
    reac = reaction[:, None, None] * mass_blocks(nodes, triangles)
    return diff, adv, reac


def locate_points(nodes, triangles, points, tol=1e-10):
    """Containing triangle and barycentric coordinates for each point.

    Points on shared edges are assigned to the lowest triangle index.
    Returns ``tri_idx`` with -1 for points outside every triangle (beyond
    ``tol`` in barycentric units) and clipped, renormalized coordinates.
    """
    points = np.ascontiguousarray(points, dtype=float)
    n_pts = points.shape[0]
    tri_idx = np.full(n_pts, -1, dtype=np.int64)
    bary = np.zeros((n_pts, 3))

    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    e1 = p1 - p0
    e2 = p2 - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]

    for start in range(0, n_pts, _LOCATE_CHUNK):
        sl = slice(start, min(start + _LOCATE_CHUNK, n_pts))
        d = points[sl, None, :] - p0[None, :, :]  # (chunk, T, 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            l1 = (d[:, :, 0] * e2[None, :, 1]
                  - d[:, :, 1] * e2[None, :, 0]) / det
            l2 = (e1[None, :, 0] * d[:, :, 1]
                  - e1[None, :, 1] * d[:, :, 0]) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
        has_hit = inside.any(axis=1)
        first = np.where(has_hit, inside.argmax(axis=1), -1)
        rows = np.nonzero(has_hit)[0]
        cols = first[rows]
        idx_global = np.arange(sl.start, sl.stop)[rows]
        tri_idx[idx_global] = cols
        bl = np.stack([l0[rows, cols], l1[rows, cols], l2[rows, cols]], axis=1)
        bl = np.clip(bl, 0.0, None)
        bl /= bl.sum(axis=1, keepdims=True)
        bary[idx_global] = bl
    return tri_idx, bary


def bspline_design(knots: np.ndarray, degree: int, x: np.ndarray,
                   nu: int = 0) -> np.ndarray:
    """Dense design matrix of the ``nu``-th derivative of every basis spline.

    Columns correspond to the ``len(knots) - degree - 1`` basis functions of
    the given knot vector, evaluated at the points ``x``.
    """
    knots = np.asarray(knots, dtype=float)
    x = np.asarray(x, dtype=float)
    m = len(knots) - degree - 1
    out = np.empty((x.size, m))
    coef = np.zeros(m)
    for r in range(m):
        coef[r] = 1.0
        b = BSpline(knots, coef, degree, extrapolate=False)
        if nu:
            b = b.derivative(nu)
        vals = b(x)
        coef[r] = 0.0
        out[:, r] = np.nan_to_num(vals, nan=0.0)
    return out
