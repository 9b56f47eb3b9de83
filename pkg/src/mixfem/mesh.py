"""Triangulated 2D domains, P1 finite element bases, and weak-form assembly.

A :class:`TriangularMesh` carries one piecewise-linear basis function per
node.  Boundary conditions are homogeneous Neumann, imposed weakly: no
boundary rows are ever modified.  All coefficient fields of the elliptic
operator are piecewise constant per triangle, so every element integral
used here is exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels

DEGENERATE_REL_AREA = 1e-14


class MeshError(ValueError):
    """Invalid mesh geometry or topology."""


@dataclass(frozen=True)
class TriangularMesh:
    """Conforming triangulation with consistently oriented triangles.

    Attributes
    ----------
    nodes : (N, 2) float array of vertex coordinates.
    triangles : (T, 3) int array of node indices, counterclockwise.
    boundary_edges : (E, 2) int array; each edge belongs to one triangle.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_areas(self) -> np.ndarray:
        areas, _ = kernels.triangle_geometry(self.nodes, self.triangles)
        return areas

    def area(self) -> float:
        return float(self.triangle_areas().sum())


def make_mesh(nodes, triangles) -> TriangularMesh:
    """Validate, orient, and index a triangulation.

    Clockwise triangles are reoriented.  Degenerate triangles (area below
    ``DEGENERATE_REL_AREA`` times the bounding-box area) and non-manifold
    edges (shared by more than two triangles) are hard errors.
    """
    nodes = np.ascontiguousarray(nodes, dtype=float)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshError(f"nodes must be (N, 2), got {nodes.shape}")
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise MeshError(f"triangles must be (T, 3), got {triangles.shape}")
    n = nodes.shape[0]
    if triangles.size and (triangles.min() < 0 or triangles.max() >= n):
        raise MeshError("triangle indices out of range")

    areas, _ = kernels.triangle_geometry(nodes, triangles)
    flipped = areas < 0
    if flipped.any():
        triangles = triangles.copy()
        triangles[flipped] = triangles[flipped][:, [0, 2, 1]]
        areas = np.abs(areas)
    bbox = np.ptp(nodes, axis=0)
    bbox_area = float(bbox[0] * bbox[1]) or 1.0
    if (areas < DEGENERATE_REL_AREA * bbox_area).any():
        bad = int(np.argmin(areas))
        raise MeshError(f"degenerate triangle {bad} (area {areas[bad]:.3e})")

    edge_count: dict[tuple[int, int], int] = {}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(min(a, b)), int(max(a, b)))
            edge_count[key] = edge_count.get(key, 0) + 1
    if any(c > 2 for c in edge_count.values()):
        raise MeshError("non-manifold edge (shared by more than 2 triangles)")
    boundary = sorted(e for e, c in edge_count.items() if c == 1)
    boundary_edges = np.array(boundary, dtype=np.int64).reshape(-1, 2)

    nodes.setflags(write=False)
    triangles.setflags(write=False)
    boundary_edges.setflags(write=False)
    return TriangularMesh(nodes, triangles, boundary_edges)


def unit_square_mesh(subdivisions: int) -> TriangularMesh:
    """Uniform triangulation of [0, 1]^2 with ``(subdivisions + 1)^2`` nodes.

    Each grid cell is split along its lower-left to upper-right diagonal.
    """
    if subdivisions < 1:
        raise MeshError("subdivisions must be >= 1")
    s = subdivisions
    coords = np.linspace(0.0, 1.0, s + 1)
    xx, yy = np.meshgrid(coords, coords, indexing="ij")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    def nid(i, j):
        return i * (s + 1) + j

    tris = []
    for i in range(s):
        for j in range(s):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    return make_mesh(nodes, np.array(tris))


def read_mesh_csv(nodes_path, triangles_path) -> TriangularMesh:
    """Mesh from two CSV files: nodes with header x,y; triangles i,j,k."""
    nodes = _read_csv_columns(nodes_path, ("x", "y"), float)
    tris = _read_csv_columns(triangles_path, ("i", "j", "k"), int)
    return make_mesh(np.array(nodes), np.array(tris))


def write_mesh_csv(mesh: TriangularMesh, nodes_path, triangles_path) -> None:
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        w.writerows(mesh.nodes.tolist())
    with open(triangles_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k"])
        w.writerows(mesh.triangles.tolist())


def _read_csv_columns(path, names, cast):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in names if c not in (reader.fieldnames or [])]
        if missing:
            raise MeshError(f"{path}: missing columns {missing}")
        for rec in reader:
            rows.append(tuple(cast(rec[c]) for c in names))
    return rows


@dataclass(frozen=True)
class PdeCoefficients:
    """Piecewise-constant coefficients of the elliptic operator.

    ``diffusion`` is a per-triangle SPD tensor, ``advection`` a per-triangle
    transport vector scaled by the multiplier ``xi``, ``reaction`` a
    per-triangle scalar.  The forcing term is identically zero.
    """

    diffusion: np.ndarray  # (T, 2, 2)
    advection: np.ndarray  # (T, 2)
    reaction: np.ndarray  # (T,)
    xi: float = 1.0

    def __post_init__(self):
        if self.xi < 0:
            raise ValueError("transport multiplier xi must be >= 0")
        K = self.diffusion
        if not np.allclose(K, np.swapaxes(K, 1, 2), atol=1e-12):
            raise ValueError("diffusion tensors must be symmetric")
        tr = K[:, 0, 0] + K[:, 1, 1]
        det = K[:, 0, 0] * K[:, 1, 1] - K[:, 0, 1] * K[:, 1, 0]
        if (det <= 0).any() or (tr <= 0).any():
            raise ValueError("diffusion tensors must be positive definite")


def isotropic_coefficients(mesh: TriangularMesh) -> PdeCoefficients:
    """Laplacian case: identity diffusion, no advection, no reaction."""
    t = mesh.n_triangles
    return PdeCoefficients(
        diffusion=np.tile(np.eye(2), (t, 1, 1)),
        advection=np.zeros((t, 2)),
        reaction=np.zeros(t),
        xi=0.0,
    )


def anisotropy_tensor(intensity: float, angle: float) -> np.ndarray:
    """Unit-determinant diffusion tensor smoothing along ``angle``.

    Built as R(angle) diag(intensity, 1) R(angle)^T, rescaled to unit
    determinant so the overall smoothing level stays comparable across
    intensities.
    """
    if intensity <= 0:
        raise ValueError("anisotropy intensity must be > 0")
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    k = rot @ np.diag([float(intensity), 1.0]) @ rot.T
    return k / np.sqrt(intensity)


def anisotropic_coefficients(mesh: TriangularMesh, intensity: float,
                             angle: float) -> PdeCoefficients:
    t = mesh.n_triangles
    return PdeCoefficients(
        diffusion=np.tile(anisotropy_tensor(intensity, angle), (t, 1, 1)),
        advection=np.zeros((t, 2)),
        reaction=np.zeros(t),
        xi=0.0,
    )


def transport_coefficients(mesh: TriangularMesh, xi: float,
                           wind: np.ndarray) -> PdeCoefficients:
    """Isotropic diffusion plus a per-triangle transport field times xi."""
    wind = np.asarray(wind, dtype=float)
    if wind.shape != (mesh.n_triangles, 2):
        raise ValueError(
            f"wind field must be ({mesh.n_triangles}, 2), got {wind.shape}")
    t = mesh.n_triangles
    return PdeCoefficients(
        diffusion=np.tile(np.eye(2), (t, 1, 1)),
        advection=wind.copy(),
        reaction=np.zeros(t),
        xi=float(xi),
    )


def locate_point(mesh: TriangularMesh, point):
    """Containing triangle and barycentric coordinates of one point.

    Returns ``(triangle_index, bary)`` or ``None`` when the point lies
    outside the mesh.
    """
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(point, dtype=float)))
    idx, bary = kernels.locate_points(mesh.nodes, mesh.triangles, pts)
    if idx[0] < 0:
        return None
    return int(idx[0]), bary[0]


def spatial_eval_matrix(mesh: TriangularMesh, points, *,
                        outside: str = "error") -> sp.csr_matrix:
    """Row-sparse matrix of P1 basis values at ``points``.

    Row i holds the barycentric coordinates of point i in the vertices of
    its containing triangle (at most 3 nonzeros; rows sum to 1 inside the
    mesh).  ``outside`` is either ``"error"`` or ``"zero"`` (all-zero row
    for points not in any triangle).
    """
    points = np.ascontiguousarray(np.asarray(points, dtype=float))
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"points must be (n, 2), got {points.shape}")
    idx, bary = kernels.locate_points(mesh.nodes, mesh.triangles, points)
    if outside == "error" and (idx < 0).any():
        bad = int(np.argmax(idx < 0))
        raise MeshError(f"point {bad} {points[bad]} lies outside the mesh")
    inside = np.nonzero(idx >= 0)[0]
    rows = np.repeat(inside, 3)
    cols = mesh.triangles[idx[inside]].ravel()
    data = bary[inside].ravel()
    mat = sp.csr_matrix((data, (rows, cols)),
                        shape=(points.shape[0], mesh.n_nodes))
    mat.sum_duplicates()
    return mat


def assemble_mass(mesh: TriangularMesh) -> sp.csr_matrix:
    """Mass matrix: entry (l, r) integrates hat_l * hat_r over the domain."""
    blocks = kernels.mass_blocks(mesh.nodes, mesh.triangles)
    return _scatter_blocks(mesh, blocks)


def assemble_operator_parts(mesh: TriangularMesh, pde: PdeCoefficients):
    """Diffusion, advection, and reaction parts of the operator matrix.

    The advection part is returned unscaled; the full operator applies the
    transport multiplier ``pde.xi`` to it.
    """
    diff, adv, reac = kernels.operator_blocks(
        mesh.nodes, mesh.triangles,
        np.ascontiguousarray(pde.diffusion),
        np.ascontiguousarray(pde.advection),
        np.ascontiguousarray(pde.reaction))
    return (_scatter_blocks(mesh, diff), _scatter_blocks(mesh, adv),
            _scatter_blocks(mesh, reac))


def assemble_operator(mesh: TriangularMesh, pde: PdeCoefficients) -> sp.csr_matrix:
    """Weak-form operator matrix: diffusion + xi * advection + reaction."""
    diff, adv, reac = assemble_operator_parts(mesh, pde)
    out = (diff + pde.xi * adv + reac).tocsr()
    out.sum_duplicates()
    return out


def _scatter_blocks(mesh: TriangularMesh, blocks: np.ndarray) -> sp.csr_matrix:
    tris = mesh.triangles
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)),
                        shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    mat.sum_duplicates()
    return mat


def write_coordinate_file(matrix, path) -> None:
    """Dump a matrix in (row, col, value) text form for debugging."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for i in order:
            w.writerow([int(coo.row[i]), int(coo.col[i]),
                        repr(float(coo.data[i]))])
