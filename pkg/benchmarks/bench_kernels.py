#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure NumPy fallback.

Times the three hot kernels (element-block assembly, point location,
B-spline design evaluation) on a fine mesh and prints a table with the
speedup of the compiled path.  Run from the repository root:

    python benchmarks/bench_kernels.py [--subdivisions 64] [--points 200000]
"""

import argparse
import time

import numpy as np


def _timeit(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--subdivisions", type=int, default=64)
    parser.add_argument("--points", type=int, default=200_000)
    parser.add_argument("--spline-points", type=int, default=500_000)
    args = parser.parse_args()

    try:
        from mixfem.kernels import _core
    except ImportError:
        raise SystemExit("compiled kernels not built; run "
                         "`python setup.py build_ext --inplace` first")
    from mixfem.kernels import _pure
    from mixfem.mesh import unit_square_mesh
    from mixfem.splines import cubic_spline_basis

    mesh = unit_square_mesh(args.subdivisions)
    rng = np.random.default_rng(0)
    t = mesh.n_triangles
    diffusion = np.tile(np.array([[2.0, 0.3], [0.3, 1.0]]), (t, 1, 1))
    advection = np.ascontiguousarray(rng.normal(size=(t, 2)))
    reaction = rng.uniform(0, 1, size=t)
    points = np.ascontiguousarray(rng.uniform(-0.05, 1.05,
                                              size=(args.points, 2)))
    basis = cubic_spline_basis(20)
    times = np.ascontiguousarray(rng.uniform(0, 1, size=args.spline_points))

    cases = [
        ("operator_blocks "
         f"({t} triangles)",
         lambda m: m.operator_blocks(mesh.nodes, mesh.triangles, diffusion,
                                     advection, reaction)),
        (f"locate_points ({args.points} pts, {t} tris)",
         lambda m: m.locate_points(mesh.nodes, mesh.triangles, points)),
        (f"bspline_design ({args.spline_points} pts, M=20, nu=0)",
         lambda m: m.bspline_design(basis.knots, 3, times, 0)),
        (f"bspline_design ({args.spline_points} pts, M=20, nu=2)",
         lambda m: m.bspline_design(basis.knots, 3, times, 2)),
    ]

    print(f"{'kernel':<45} {'compiled':>10} {'pure':>10} {'speedup':>8}")
    for name, runner in cases:
        t_core = _timeit(lambda: runner(_core))
        t_pure = _timeit(lambda: runner(_pure))
        print(f"{name:<45} {t_core:>9.4f}s {t_pure:>9.4f}s "
              f"{t_pure / t_core:>7.1f}x")


if __name__ == "__main__":
    main()
