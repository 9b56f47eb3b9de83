"""Compiled core vs pure NumPy fallback: identical results."""

import importlib
import subprocess
import sys

import numpy as np
import pytest

from mixfem.kernels import _pure

_core = pytest.importorskip("mixfem.kernels._core",
                            reason="compiled kernels not built")
from mixfem.mesh import unit_square_mesh  # noqa: E402
from mixfem.splines import cubic_spline_basis  # noqa: E402


@pytest.fixture(scope="module")
def geometry():
    mesh = unit_square_mesh(7)
    rng = np.random.default_rng(0)
    t = mesh.n_triangles
    diffusion = np.empty((t, 2, 2))
    for i in range(t):
        a = rng.normal(size=(2, 2))
        diffusion[i] = a @ a.T + 0.5 * np.eye(2)
    advection = rng.normal(size=(t, 2))
    reaction = rng.uniform(0, 2, size=t)
    return mesh, np.ascontiguousarray(diffusion), \
        np.ascontiguousarray(advection), reaction


def test_triangle_geometry_agrees(geometry):
    mesh = geometry[0]
    a1, g1 = _core.triangle_geometry(mesh.nodes, mesh.triangles)
    a2, g2 = _pure.triangle_geometry(mesh.nodes, mesh.triangles)
    assert np.allclose(a1, a2, atol=1e-15)
    assert np.allclose(g1, g2, atol=1e-13)


def test_element_blocks_agree(geometry):
    mesh, diffusion, advection, reaction = geometry
    m1 = _core.mass_blocks(mesh.nodes, mesh.triangles)
    m2 = _pure.mass_blocks(mesh.nodes, mesh.triangles)
    assert np.allclose(m1, m2, atol=1e-16)
    blocks1 = _core.operator_blocks(mesh.nodes, mesh.triangles, diffusion,
                                    advection, reaction)
    blocks2 = _pure.operator_blocks(mesh.nodes, mesh.triangles, diffusion,
                                    advection, reaction)
    for b1, b2 in zip(blocks1, blocks2):
        assert np.allclose(b1, b2, atol=1e-13)


def test_locate_agrees_including_edges_and_outside(geometry):
    mesh = geometry[0]
    rng = np.random.default_rng(1)
    pts = np.vstack([
        rng.uniform(-0.2, 1.2, size=(300, 2)),
        mesh.nodes[:20],  # vertices
        mesh.nodes[mesh.triangles[:20]].mean(axis=1),  # centroids
    ])
    pts = np.ascontiguousarray(pts)
    i1, b1 = _core.locate_points(mesh.nodes, mesh.triangles, pts)
    i2, b2 = _pure.locate_points(mesh.nodes, mesh.triangles, pts)
    assert np.array_equal(i1, i2)
    assert np.allclose(b1, b2, atol=1e-12)


def test_bspline_design_agrees_and_matches_naive_recursion():
    basis = cubic_spline_basis(9, t_max=2.0)
    rng = np.random.default_rng(2)
    x = np.ascontiguousarray(np.r_[0.0, rng.uniform(0, 2, 60), 2.0])
    for nu in (0, 1, 2):
        d1 = _core.bspline_design(basis.knots, 3, x, nu)
        d2 = _pure.bspline_design(basis.knots, 3, x, nu)
        assert np.allclose(d1, d2, atol=1e-10)


def test_forced_pure_backend_selection():
    code = ("import mixfem.kernels as k; "
            "print(k.BACKEND)")
    out = subprocess.run(
        [sys.executable, "-c", code],
        env={"MIXFEM_PURE_PYTHON": "1", "PYTHONPATH": "src",
             "PATH": "/usr/bin:/bin"},
        capture_output=True, text=True, cwd=".")
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == "python"


def test_default_backend_is_compiled_when_available():
    import os

    import mixfem.kernels as kernels
    assert kernels.BACKEND in ("compiled", "python")
    if os.environ.get("MIXFEM_PURE_PYTHON", "") not in ("", "0"):
        pytest.skip("pure backend forced via environment")
    # this test file only runs when _core imports, so the default must pick it
    importlib.reload(kernels)
    assert kernels.BACKEND == "compiled"
