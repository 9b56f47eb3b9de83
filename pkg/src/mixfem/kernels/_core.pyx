# cython: language_level=3
"""Compiled hot kernels: FEM element blocks, point location, B-spline design.

Mirrors ``_pure.py``; keep the two in sync.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def triangle_geometry(const double[:, ::1] nodes, const cnp.int64_t[:, ::1] triangles):
    cdef Py_ssize_t t, n_tri = triangles.shape[0]
    cdef double x0, y0, x1, y1, x2, y2, twice_area
    areas_arr = np.empty(n_tri)
    grads_arr = np.empty((n_tri, 3, 2))
    cdef double[::1] areas = areas_arr
    cdef double[:, :, ::1] grads = grads_arr
    for t in range(n_tri):
        x0 = nodes[triangles[t, 0], 0]; y0 = nodes[triangles[t, 0], 1]
        x1 = nodes[triangles[t, 1], 0]; y1 = nodes[triangles[t, 1], 1]
        x2 = nodes[triangles[t, 2], 0]; y2 = nodes[triangles[t, 2], 1]
        twice_area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        areas[t] = 0.5 * twice_area
        grads[t, 0, 0] = (y1 - y2) / twice_area
        grads[t, 0, 1] = (x2 - x1) / twice_area
        grads[t, 1, 0] = (y2 - y0) / twice_area
        grads[t, 1, 1] = (x0 - x2) / twice_area
        grads[t, 2, 0] = (y0 - y1) / twice_area
        grads[t, 2, 1] = (x1 - x0) / twice_area
    return areas_arr, grads_arr


def mass_blocks(const double[:, ::1] nodes, const cnp.int64_t[:, ::1] triangles):
    cdef Py_ssize_t t, i, j, n_tri = triangles.shape[0]
    areas_arr, _ = triangle_geometry(nodes, triangles)
    cdef double[::1] areas = areas_arr
    out_arr = np.empty((n_tri, 3, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double a12
    for t in range(n_tri):
        a12 = areas[t] / 12.0
        for i in range(3):
            for j in range(3):
                out[t, i, j] = a12 * (2.0 if i == j else 1.0)
    return out_arr


def operator_blocks(const double[:, ::1] nodes, const cnp.int64_t[:, ::1] triangles,
                    const double[:, :, ::1] diffusion, const double[:, ::1] advection,
                    const double[::1] reaction):
    cdef Py_ssize_t t, i, j, n_tri = triangles.shape[0]
    areas_arr, grads_arr = triangle_geometry(nodes, triangles)
    cdef double[::1] areas = areas_arr
    cdef double[:, :, ::1] grads = grads_arr
    diff_arr = np.empty((n_tri, 3, 3))
    adv_arr = np.empty((n_tri, 3, 3))
    reac_arr = np.empty((n_tri, 3, 3))
    cdef double[:, :, ::1] diff = diff_arr
    cdef double[:, :, ::1] adv = adv_arr
    cdef double[:, :, ::1] reac = reac_arr
    cdef double kg0, kg1, area, gdot, m12
    for t in range(n_tri):
        area = areas[t]
        for j in range(3):
            kg0 = diffusion[t, 0, 0] * grads[t, j, 0] + diffusion[t, 0, 1] * grads[t, j, 1]
            kg1 = diffusion[t, 1, 0] * grads[t, j, 0] + diffusion[t, 1, 1] * grads[t, j, 1]
            gdot = advection[t, 0] * grads[t, j, 0] + advection[t, 1] * grads[t, j, 1]
            for i in range(3):
                diff[t, i, j] = area * (grads[t, i, 0] * kg0 + grads[t, i, 1] * kg1)
                adv[t, i, j] = area / 3.0 * gdot
        m12 = reaction[t] * area / 12.0
        for i in range(3):
            for j in range(3):
                reac[t, i, j] = m12 * (2.0 if i == j else 1.0)
    return diff_arr, adv_arr, reac_arr


def locate_points(const double[:, ::1] nodes, const cnp.int64_t[:, ::1] triangles,
                  const double[:, ::1] points, double tol=1e-10):
    cdef Py_ssize_t p, t, n_pts = points.shape[0], n_tri = triangles.shape[0]
    cdef double x0, y0, e1x, e1y, e2x, e2y, det, dx, dy, l0, l1, l2, s
    tri_idx_arr = np.full(n_pts, -1, dtype=np.int64)
    bary_arr = np.zeros((n_pts, 3))
    cdef cnp.int64_t[::1] tri_idx = tri_idx_arr
    cdef double[:, ::1] bary = bary_arr
    for p in range(n_pts):
        for t in range(n_tri):
            x0 = nodes[triangles[t, 0], 0]; y0 = nodes[triangles[t, 0], 1]
            e1x = nodes[triangles[t, 1], 0] - x0; e1y = nodes[triangles[t, 1], 1] - y0
            e2x = nodes[triangles[t, 2], 0] - x0; e2y = nodes[triangles[t, 2], 1] - y0
            det = e1x * e2y - e1y * e2x
            dx = points[p, 0] - x0; dy = points[p, 1] - y0
            l1 = (dx * e2y - dy * e2x) / det
            l2 = (e1x * dy - e1y * dx) / det
            l0 = 1.0 - l1 - l2
            if l0 >= -tol and l1 >= -tol and l2 >= -tol:
                if l0 < 0.0: l0 = 0.0
                if l1 < 0.0: l1 = 0.0
                if l2 < 0.0: l2 = 0.0
                s = l0 + l1 + l2
                bary[p, 0] = l0 / s
                bary[p, 1] = l1 / s
                bary[p, 2] = l2 / s
                tri_idx[p] = t
                break
    return tri_idx_arr, bary_arr


cdef int _find_span(const double[::1] knots, int degree, int m, double x):
    # Span s with knots[s] <= x < knots[s+1]; the right end maps into the
    # last nonempty span so clamped bases evaluate to their left limit.
    cdef int lo, hi, mid
    if x >= knots[m]:
        return m - 1
    if x <= knots[degree]:
        return degree
    lo = degree
    hi = m
    mid = (lo + hi) // 2
    while x < knots[mid] or x >= knots[mid + 1]:
        if x < knots[mid]:
            hi = mid
        else:
            lo = mid
        mid = (lo + hi) // 2
    return mid


def bspline_design(const double[::1] knots, int degree, const double[::1] x, int nu=0):
    """Design matrix of the nu-th derivative of all basis splines at x."""
    cdef int m = knots.shape[0] - degree - 1
    cdef Py_ssize_t n_pts = x.shape[0]
    cdef int span, j, r, k, s1, s2, rk, pk, j1, j2, jj
    cdef double saved, temp, d, xi
    out_arr = np.zeros((n_pts, m))
    cdef double[:, ::1] out = out_arr
    # workspaces for the triangular recurrences
    ndu_arr = np.empty((degree + 1, degree + 1))
    a_arr = np.empty((2, degree + 1))
    ders_arr = np.empty(degree + 1)
    left_arr = np.empty(degree + 1)
    right_arr = np.empty(degree + 1)
    cdef double[:, ::1] ndu = ndu_arr
    cdef double[:, ::1] a = a_arr
    cdef double[::1] ders = ders_arr
    cdef double[::1] left = left_arr
    cdef double[::1] right = right_arr
    cdef Py_ssize_t p
    cdef double fac

    for p in range(n_pts):
        xi = x[p]
        span = _find_span(knots, degree, m, xi)
        ndu[0, 0] = 1.0
        for j in range(1, degree + 1):
            left[j] = xi - knots[span + 1 - j]
            right[j] = knots[span + j] - xi
            saved = 0.0
            for r in range(j):
                ndu[j, r] = right[r + 1] + left[j - r]
                temp = ndu[r, j - 1] / ndu[j, r]
                ndu[r, j] = saved + right[r + 1] * temp
                saved = left[j - r] * temp
            ndu[j, j] = saved
        if nu == 0:
            for j in range(degree + 1):
                out[p, span - degree + j] = ndu[j, degree]
            continue
        if nu > degree:
            continue
        # derivative of order nu for each of the degree+1 active functions
        for r in range(degree + 1):
            a[0, 0] = 1.0
            s1 = 0
            s2 = 1
            d = 0.0
            for k in range(1, nu + 1):
                d = 0.0
                rk = r - k
                pk = degree - k
                if r >= k:
                    a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                    d = a[s2, 0] * ndu[rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = k - 1 if r - 1 <= pk else degree - r
                for jj in range(j1, j2 + 1):
                    a[s2, jj] = (a[s1, jj] - a[s1, jj - 1]) / ndu[pk + 1, rk + jj]
                    d += a[s2, jj] * ndu[rk + jj, pk]
                if r <= pk:
                    a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                    d += a[s2, k] * ndu[r, pk]
                s1, s2 = s2, s1
            ders[r] = d
        fac = 1.0
        for k in range(nu):
            fac *= degree - k
        for j in range(degree + 1):
            out[p, span - degree + j] = ders[j] * fac
    return out_arr
