"""Monte Carlo checks of operator-hyperparameter selection (slow tier)."""

import numpy as np
import pytest

from mixfem.gcv import pde_hyperparameter_scan
from mixfem.mesh import anisotropic_coefficients, isotropic_coefficients, \
    unit_square_mesh
from mixfem.simulate import SimConfig, generate_dataset
from mixfem.solver import build_components
from mixfem.splines import cubic_spline_basis

pytestmark = pytest.mark.slow

MESH = unit_square_mesh(7)
BASIS = cubic_spline_basis(6)
ANGLES = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)


def scan_for_seed(seed, variance_ratio=0.30, intensity=8.0,
                  angle=np.pi / 4):
    obs, _ = generate_dataset(SimConfig(
        seed=seed, n_locations=60, n_times=7, n_groups=4, n_bumps=8,
        anisotropy_intensity=intensity, anisotropy_angle=angle,
        variance_ratio=variance_ratio))

    def components_for(pde):
        return build_components(obs, MESH, BASIS, pde)

    candidates = [isotropic_coefficients(MESH)] + [
        anisotropic_coefficients(MESH, 8.0, a) for a in ANGLES]
    _, best, _, _ = pde_hyperparameter_scan(
        components_for, candidates, [3e-5, 3e-4], [1e-3])
    return best, candidates


def test_anisotropic_angle_recovered():
    hits = 0
    for seed in range(1, 11):
        best, _ = scan_for_seed(seed)
        # candidate 2 is the pi/4 direction; accept a pi/8 neighborhood,
        # which on this grid means exactly that candidate
        if best == 2:
            hits += 1
    print(f"\n[gcv scan] angle recovered in {hits}/10 replicas")
    assert hits >= 7


def test_isotropic_data_prefers_low_intensity():
    hits = 0
    for seed in range(1, 11):
        best, _ = scan_for_seed(seed, intensity=1.0)
        if best == 0:  # the isotropic candidate (intensity 1)
            hits += 1
    print(f"\n[gcv scan] isotropy recovered in {hits}/10 replicas")
    assert hits >= 7
