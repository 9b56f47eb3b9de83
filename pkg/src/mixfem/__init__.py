"""Spatio-temporal mixed-effects regression with PDE-informed smoothing.

Estimates a space-time field regularized by an elliptic operator penalty
(P1 finite elements in space, cubic B-splines in time), fixed covariate
effects, and a group-level random-effect covariance via an alternating
penalized-GLS / EM loop, with generalized cross-validation for smoothing
selection and asymptotic inference for all components.
"""

__version__ = "0.1.0"

from .covariance import ErrorCovariance, HatOperators, build_H_Q
from .data import ObservationSet, build_B, build_observation_set, \
    load_observations, write_observations
from .gcv import GcvScan, default_lambda_grid, gcv_score, gcv_select, \
    pde_hyperparameter_scan
from .inference import asymptotic_summary, inference_report, \
    info_matrix_sigma, var_beta, var_field, variance_component_ci
from .kernels import BACKEND as kernel_backend
from .mesh import PdeCoefficients, TriangularMesh, anisotropic_coefficients, \
    anisotropy_tensor, assemble_mass, assemble_operator, \
    isotropic_coefficients, locate_point, make_mesh, read_mesh_csv, \
    spatial_eval_matrix, transport_coefficients, unit_square_mesh, \
    write_coordinate_file
from .penalty import PenaltySystem, assemble_penalty, misfit_block_residual
from .simulate import FieldEvaluator, GaussianBumpField, SimConfig, \
    generate_dataset, rmse_field
from .solver import FitOptions, ModelFit, build_components, em_step, \
    fit_components, fixed_effects_step, fpirls_fit, init_delta, \
    penalized_loglik, predict_random_effects, update_sigma2
from .splines import SplineBasis, assemble_curvature_penalty, \
    assemble_time_mass, cubic_spline_basis, eval_basis, greville_points

__all__ = [
    "__version__",
    "kernel_backend",
    "TriangularMesh", "PdeCoefficients", "make_mesh", "unit_square_mesh",
    "read_mesh_csv", "locate_point", "spatial_eval_matrix", "assemble_mass",
    "assemble_operator", "isotropic_coefficients",
    "anisotropic_coefficients", "transport_coefficients",
    "anisotropy_tensor", "write_coordinate_file",
    "SplineBasis", "cubic_spline_basis", "eval_basis", "greville_points",
    "assemble_time_mass", "assemble_curvature_penalty",
    "PenaltySystem", "assemble_penalty", "misfit_block_residual",
    "ObservationSet", "build_observation_set", "load_observations",
    "write_observations", "build_B",
    "ErrorCovariance", "HatOperators", "build_H_Q",
    "ModelFit", "FitOptions", "build_components", "fit_components",
    "fpirls_fit", "fixed_effects_step", "predict_random_effects", "em_step",
    "update_sigma2", "init_delta", "penalized_loglik",
    "GcvScan", "gcv_score", "gcv_select", "pde_hyperparameter_scan",
    "default_lambda_grid",
    "var_field", "var_beta", "info_matrix_sigma", "variance_component_ci",
    "asymptotic_summary", "inference_report",
    "SimConfig", "generate_dataset", "rmse_field", "FieldEvaluator",
    "GaussianBumpField",
]
