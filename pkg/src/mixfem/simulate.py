"""Synthetic space-time datasets with group structure, and field RMSE.

The generator follows the unit-square study design: uniform random
locations, equispaced times, a balanced random partition of locations
into groups with Gaussian random intercepts, two smooth random covariate
fields, and a truth field built from anisotropically stretched Gaussian
bumps whose centers drift linearly in time.  Everything is a deterministic
function of the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import ObservationSet, build_observation_set
from .mesh import TriangularMesh
from .splines import SplineBasis, eval_basis


@dataclass(frozen=True)
class SimConfig:
    """Study parameters; the defaults reproduce the unit-square design."""

    n_locations: int = 100
    n_times: int = 11
    n_groups: int = 6
    beta_true: tuple = (1.0, -1.0)
    noise_sd: float = 0.25
    variance_ratio: float = 0.30  # sigma_b^2 / (sigma^2 + sigma_b^2)
    anisotropy_intensity: float = 8.0
    anisotropy_angle: float = math.pi / 4.0
    seed: int = 0
    missing_fraction: float = 0.0
    n_bumps: int = 12
    t_max: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.variance_ratio < 1.0:
            raise ValueError("variance_ratio must be in [0, 1)")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError("missing_fraction must be in [0, 1)")
        if self.n_groups > self.n_locations:
            raise ValueError("cannot have more groups than locations")

    @property
    def sigma_b(self) -> float:
        """Group-effect scale implied by the variance ratio."""
        r = self.variance_ratio
        return self.noise_sd * math.sqrt(r / (1.0 - r))


@dataclass(frozen=True)
class GaussianBumpField:
    """Sum of drifting anisotropic Gaussian bumps; callable on (points, times)."""

    amplitudes: np.ndarray  # (J,)
    centers: np.ndarray  # (J, 2) at t = t_max / 2
    velocities: np.ndarray  # (J, 2)
    precisions: np.ndarray  # (J, 2, 2)
    t_center: float

    def __call__(self, points, times) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        times = np.broadcast_to(np.asarray(times, dtype=float),
                                (points.shape[0],))
        out = np.zeros(points.shape[0])
        for a, c, v, e in zip(self.amplitudes, self.centers,
                              self.velocities, self.precisions):
            d = points - c - np.outer(times - self.t_center, v)
            out += a * np.exp(-np.einsum("ia,ab,ib->i", d, e, d))
        return out


@dataclass(frozen=True)
class FieldEvaluator:
    """Fitted space-time field f(p, t) from basis coefficients."""

    mesh: TriangularMesh
    basis: SplineBasis
    coeffs: np.ndarray = field(repr=False)  # (N M,), time-major

    def __call__(self, points, times, outside: str = "error") -> np.ndarray:
        """Paired evaluation; ``outside`` is ``"error"`` or ``"nan"``."""
        points = np.ascontiguousarray(np.atleast_2d(
            np.asarray(points, dtype=float)))
        times = np.broadcast_to(np.asarray(times, dtype=float),
                                (points.shape[0],)).copy()
        idx, bary = kernels.locate_points(self.mesh.nodes,
                                          self.mesh.triangles, points)
        if outside == "error" and (idx < 0).any():
            bad = int(np.argmax(idx < 0))
            raise ValueError(f"point {points[bad]} lies outside the mesh")
        inside = idx >= 0
        phi = eval_basis(self.basis, times[inside])  # (k, M)
        fmat = self.coeffs.reshape(self.basis.n_basis, self.mesh.n_nodes)
        verts = self.mesh.triangles[idx[inside]]  # (k, 3)
        # f(p, t) = sum_r phi_r(t) * sum_l psi_l(p) f_{l r}
        space_vals = np.einsum("km,krm->kr", phi,
                               fmat[:, verts].transpose(1, 2, 0))
        vals_inside = np.einsum("kr,kr->k", space_vals, bary[inside])
        out = np.full(points.shape[0], np.nan)
        out[inside] = vals_inside
        return out


def generate_dataset(config: SimConfig):
    """Draw one replica.

    Returns ``(ObservationSet, truth)`` where ``truth`` is a dict holding
    the bump field, the coefficient vector, per-group effects (in group
    label order), and the noise scales.
    """
    rng = np.random.default_rng(config.seed)
    n, m, g = config.n_locations, config.n_times, config.n_groups
    locations = rng.uniform(0.0, 1.0, size=(n, 2))
    times = np.linspace(0.0, config.t_max, m)

    group_of_loc = np.empty(n, dtype=np.int64)
    group_of_loc[rng.permutation(n)] = np.arange(n) % g
    width = len(str(g - 1))
    labels = np.array([f"g{k:0{width}d}" for k in range(g)])

    truth_field = _draw_bump_field(rng, config)
    cov_fields = [_draw_wave_field(rng, config.t_max) for _ in range(2)]
    b_true = rng.normal(scale=config.sigma_b, size=g) \
        if config.sigma_b > 0 else np.zeros(g)

    li = np.repeat(np.arange(n), m)
    ti = np.tile(np.arange(m), n)
    if config.missing_fraction > 0:
        n_drop = round(config.missing_fraction * n * m)
        drop = rng.choice(n * m, size=n_drop, replace=False)
        keep = np.setdiff1d(np.arange(n * m), drop)
        li, ti = li[keep], ti[keep]

    pts = locations[li]
    tvals = times[ti]
    x_mat = np.column_stack([f(pts, tvals) for f in cov_fields])
    f_vals = truth_field(pts, tvals)
    eps = rng.normal(scale=config.noise_sd, size=li.size)
    beta = np.asarray(config.beta_true, dtype=float)
    y = x_mat @ beta + f_vals + b_true[group_of_loc[li]] + eps

    obs = build_observation_set(
        locations, times, li, ti, labels[group_of_loc[li]], y, x_mat,
        np.ones((li.size, 1)))
    truth = {
        "field": truth_field,
        "beta": beta,
        "group_effects": b_true,  # indexed by sorted group label
        "sigma": config.noise_sd,
        "sigma_b": config.sigma_b,
        "covariate_fields": cov_fields,
    }
    return obs, truth


def _draw_bump_field(rng, config: SimConfig) -> GaussianBumpField:
    j = config.n_bumps
    centers = rng.uniform(0.1, 0.9, size=(j, 2))
    angles = rng.uniform(0.0, 2.0 * math.pi, size=j)
    speeds = rng.uniform(0.0, 0.3, size=j)
    velocities = np.column_stack([speeds * np.cos(angles),
                                  speeds * np.sin(angles)])
    # cross-stretch scale resolvable at the study's sampling density
    base = rng.uniform(0.12, 0.2, size=j)
    c, s = math.cos(config.anisotropy_angle), math.sin(config.anisotropy_angle)
    rot = np.array([[c, -s], [s, c]])
    precisions = np.empty((j, 2, 2))
    for idx in range(j):
        var_perp = base[idx] ** 2
        var_par = config.anisotropy_intensity * var_perp
        precisions[idx] = rot @ np.diag([1.0 / var_par,
                                         1.0 / var_perp]) @ rot.T
    amplitudes = rng.normal(size=j)
    fld = GaussianBumpField(amplitudes=amplitudes, centers=centers,
                            velocities=velocities, precisions=precisions,
                            t_center=0.5 * config.t_max)
    # normalize to unit standard deviation over a fixed probe grid
    gx = np.linspace(0.05, 0.95, 12)
    probe_pts = np.array([(a, b) for a in gx for b in gx])
    probe = np.concatenate([fld(probe_pts, np.full(len(probe_pts), t))
                            for t in np.linspace(0, config.t_max, 5)])
    sd = probe.std()
    if sd > 0:
        fld = GaussianBumpField(
            amplitudes=amplitudes / sd, centers=centers,
            velocities=velocities, precisions=precisions,
            t_center=0.5 * config.t_max)
    return fld


@dataclass(frozen=True)
class _WaveField:
    coeffs: np.ndarray
    wavevectors: np.ndarray  # (H, 2)
    freqs: np.ndarray  # (H,)
    phases: np.ndarray
    shift: float
    scale: float

    def __call__(self, points, times):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        times = np.broadcast_to(np.asarray(times, dtype=float),
                                (points.shape[0],))
        arg = (points @ self.wavevectors.T + np.outer(times, self.freqs)
               + self.phases)
        vals = np.sin(2.0 * math.pi * arg) @ self.coeffs
        return (vals - self.shift) / self.scale


def _draw_wave_field(rng, t_max: float) -> _WaveField:
    h = 6
    wavevectors = rng.integers(-2, 3, size=(h, 2)).astype(float)
    freqs = rng.integers(0, 3, size=h).astype(float) / t_max
    phases = rng.uniform(0, 1, size=h)
    weights = rng.normal(size=h) / (1.0 + (wavevectors ** 2).sum(axis=1))
    raw = _WaveField(coeffs=weights, wavevectors=wavevectors, freqs=freqs,
                     phases=phases, shift=0.0, scale=1.0)
    gx = np.linspace(0.05, 0.95, 10)
    probe_pts = np.array([(a, b) for a in gx for b in gx])
    probe = np.concatenate([raw(probe_pts, np.full(len(probe_pts), t))
                            for t in np.linspace(0, t_max, 4)])
    sd = probe.std()
    return _WaveField(coeffs=weights, wavevectors=wavevectors, freqs=freqs,
                      phases=phases, shift=float(probe.mean()),
                      scale=float(sd if sd > 0 else 1.0))


def rmse_field(field_a, field_b, mesh: TriangularMesh, t_max: float,
               n_time_intervals: int = 16) -> float:
    """Root integrated squared difference over domain x [0, t_max].

    Tensor quadrature: the 3-midpoint rule per mesh triangle (exact for
    quadratics in space) times 4-point Gauss-Legendre on each time
    subinterval.
    """
    verts = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    mids = 0.5 * (verts + np.roll(verts, -1, axis=1))  # edge midpoints
    areas = mesh.triangle_areas()
    space_pts = mids.reshape(-1, 2)
    space_w = np.repeat(areas / 3.0, 3)

    nodes, weights = np.polynomial.legendre.leggauss(4)
    edges = np.linspace(0.0, t_max, n_time_intervals + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        for xi, wt in zip(nodes, weights):
            t = lo + half * (xi + 1.0)
            diff = (field_a(space_pts, np.full(len(space_pts), t))
                    - field_b(space_pts, np.full(len(space_pts), t)))
            total += wt * half * float(space_w @ (diff ** 2))
    return math.sqrt(max(total, 0.0))
