"""Batch command-line front end.

Subcommands: ``simulate`` (draw a synthetic dataset), ``fit`` (estimate at
fixed smoothing), ``gcv`` (grid scan, write scores, keep the best fit),
``predict`` (evaluate a fitted field on a grid), ``report`` (inference
summary).  Every command is a pure function of its inputs; identical
inputs and seed produce byte-identical outputs at any worker count.

Exit codes: 0 success, 2 malformed configuration, 3 numerical failure,
4 file I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .covariance import CovarianceError
from .data import DataError, load_observations, write_observations
from .gcv import GcvError, gcv_select
from .mesh import (
    MeshError,
    PdeCoefficients,
    anisotropic_coefficients,
    isotropic_coefficients,
    read_mesh_csv,
    transport_coefficients,
    unit_square_mesh,
)
from .inference import InferenceError, inference_report
from .simulate import FieldEvaluator, SimConfig, generate_dataset, rmse_field
from .solver import (
    FitOptions,
    ModelFit,
    SolverError,
    build_components,
    fit_components,
)
from .splines import SplineError, cubic_spline_basis
from .utils import default_threads

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(ValueError):
    """Malformed run configuration."""


# -- configuration -----------------------------------------------------------

_PDE_MODES = ("isotropic", "anisotropic", "transport")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(raw, base=Path(path).parent)


def validate_config(raw: dict, base: Path | None = None) -> dict:
    """Check types, ranges, and referenced files before any compute."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    cfg: dict = {}
    base = base or Path(".")

    mesh = raw.get("mesh", {"mode": "unit_square", "subdivisions": 10})
    mode = mesh.get("mode")
    if mode == "unit_square":
        sub = mesh.get("subdivisions")
        if not isinstance(sub, int) or sub < 1:
            raise ConfigError("mesh.subdivisions must be a positive integer")
    elif mode == "files":
        for key in ("nodes", "triangles"):
            p = mesh.get(key)
            if not p or not (base / p).exists():
                raise ConfigError(f"mesh.{key} file not found: {p}")
    else:
        raise ConfigError("mesh.mode must be 'unit_square' or 'files'")
    cfg["mesh"] = mesh

    time_cfg = raw.get("time", {"n_basis": 10, "t_max": 1.0})
    if not isinstance(time_cfg.get("n_basis", 10), int) \
            or time_cfg.get("n_basis", 10) < 4:
        raise ConfigError("time.n_basis must be an integer >= 4")
    if not float(time_cfg.get("t_max", 1.0)) > 0:
        raise ConfigError("time.t_max must be > 0")
    cfg["time"] = {"n_basis": time_cfg.get("n_basis", 10),
                   "t_max": float(time_cfg.get("t_max", 1.0))}

    pde = raw.get("pde", {"mode": "isotropic"})
    pmode = pde.get("mode")
    if pmode not in _PDE_MODES:
        raise ConfigError(f"pde.mode must be one of {_PDE_MODES}")
    if pmode == "anisotropic":
        if not float(pde.get("intensity", 0)) > 0:
            raise ConfigError("pde.intensity must be > 0")
        if "angle" not in pde:
            raise ConfigError("pde.angle is required for anisotropic mode")
    if pmode == "transport":
        if float(pde.get("xi", -1)) < 0:
            raise ConfigError("pde.xi must be >= 0")
        wind = pde.get("wind")
        if not wind or not (base / wind).exists():
            raise ConfigError(f"pde.wind file not found: {wind}")
    cfg["pde"] = pde

    lam = raw.get("lambda", {})
    has_fixed = "space" in lam and "time" in lam
    has_grid = "space_grid" in lam or "time_grid" in lam
    if has_fixed and has_grid:
        raise ConfigError("lambda: give either fixed values or grids")
    if has_fixed:
        if not (float(lam["space"]) > 0 and float(lam["time"]) > 0):
            raise ConfigError("lambda values must be > 0")
    else:
        for key in ("space_grid", "time_grid"):
            grid = lam.get(key, [])
            if grid and (np.asarray(grid, dtype=float) <= 0).any():
                raise ConfigError(f"lambda.{key} entries must be > 0")
    cfg["lambda"] = lam

    solver = raw.get("solver", {})
    tol = float(solver.get("tol", 1e-6))
    max_iter = solver.get("max_iter", 50)
    alpha = float(solver.get("alpha_init", 0.375))
    floor = float(solver.get("variance_floor", 1e-10))
    if tol <= 0 or not isinstance(max_iter, int) or max_iter < 1 \
            or alpha <= 0 or floor <= 0:
        raise ConfigError("solver: tol, alpha_init, variance_floor > 0 "
                          "and max_iter >= 1")
    cfg["solver"] = {"tol": tol, "max_iter": max_iter, "alpha_init": alpha,
                     "variance_floor": floor}

    sim = raw.get("sim", {})
    cfg["sim"] = sim
    cfg["seed"] = int(raw.get("seed", 0))
    threads = raw.get("threads")
    cfg["threads"] = int(threads) if threads is not None else None
    cfg["_base"] = base
    return cfg


def _build_geometry(cfg: dict):
    mesh_cfg = cfg["mesh"]
    if mesh_cfg["mode"] == "unit_square":
        mesh = unit_square_mesh(mesh_cfg["subdivisions"])
    else:
        base = cfg["_base"]
        mesh = read_mesh_csv(base / mesh_cfg["nodes"],
                             base / mesh_cfg["triangles"])
    basis = cubic_spline_basis(cfg["time"]["n_basis"], cfg["time"]["t_max"])
    return mesh, basis


def _build_pde(cfg: dict, mesh) -> PdeCoefficients:
    pde = cfg["pde"]
    if pde["mode"] == "isotropic":
        return isotropic_coefficients(mesh)
    if pde["mode"] == "anisotropic":
        return anisotropic_coefficients(mesh, float(pde["intensity"]),
                                        float(pde["angle"]))
    wind = _read_wind(cfg["_base"] / pde["wind"], mesh.n_triangles)
    return transport_coefficients(mesh, float(pde["xi"]), wind)


def _read_wind(path, n_triangles) -> np.ndarray:
    wind = np.zeros((n_triangles, 2))
    seen = np.zeros(n_triangles, dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("tri_id", "gx", "gy"):
            if col not in (reader.fieldnames or []):
                raise ConfigError(f"wind file missing column {col}")
        for rec in reader:
            i = int(rec["tri_id"])
            if not 0 <= i < n_triangles:
                raise ConfigError(f"wind tri_id {i} out of range")
            wind[i] = (float(rec["gx"]), float(rec["gy"]))
            seen[i] = True
    if not seen.all():
        raise ConfigError("wind file does not cover every triangle")
    return wind


def _fit_options(cfg: dict) -> FitOptions:
    s = cfg["solver"]
    return FitOptions(tol=s["tol"], max_iter=s["max_iter"],
                      alpha_init=s["alpha_init"],
                      variance_floor=s["variance_floor"])


def _config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k != "_base"},
                      sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- fit file ----------------------------------------------------------------


def write_fit_file(path, fit: ModelFit, cfg: dict) -> None:
    doc = {
        "provenance": {"config_hash": _config_hash(cfg),
                       "version": __version__},
        "mesh": cfg["mesh"],
        "time": cfg["time"],
        "beta": fit.beta.tolist(),
        "field_coeffs": fit.field_coeffs.tolist(),
        "sigma_b": fit.sigma_b.tolist(),
        "sigma2": fit.sigma2,
        "rel_precision": fit.rel_precision.tolist(),
        "rel_precision_factor": fit.rel_precision_factor.tolist(),
        "random_effects": fit.random_effects.tolist(),
        "lambda_space": fit.lambda_space,
        "lambda_time": fit.lambda_time,
        "n_iter": fit.n_iter,
        "loglik_trace": list(fit.loglik_trace),
        "converged": fit.converged,
        "degenerate": fit.degenerate,
        "regularized": fit.regularized,
        "edf": fit.edf,
        "gcv": fit.gcv,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def read_fit_file(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _fit_from_doc(doc: dict) -> ModelFit:
    return ModelFit(
        beta=np.asarray(doc["beta"], dtype=float),
        field_coeffs=np.asarray(doc["field_coeffs"], dtype=float),
        sigma_b=np.asarray(doc["sigma_b"], dtype=float),
        sigma2=float(doc["sigma2"]),
        rel_precision=np.asarray(doc["rel_precision"], dtype=float),
        rel_precision_factor=np.asarray(doc["rel_precision_factor"],
                                        dtype=float),
        random_effects=np.asarray(doc["random_effects"], dtype=float),
        lambda_space=float(doc["lambda_space"]),
        lambda_time=float(doc["lambda_time"]),
        n_iter=int(doc["n_iter"]),
        loglik_trace=tuple(doc["loglik_trace"]),
        converged=bool(doc["converged"]),
        degenerate=bool(doc["degenerate"]),
        regularized=bool(doc["regularized"]),
        edf=doc.get("edf"), gcv=doc.get("gcv"))


# -- commands ----------------------------------------------------------------


def cmd_simulate(cfg: dict, seed: int | None, out_dir: Path) -> int:
    sim = cfg.get("sim", {})
    kwargs = dict(sim)
    if seed is not None:
        kwargs["seed"] = seed
    elif "seed" not in kwargs:
        kwargs["seed"] = cfg["seed"]
    if "beta_true" in kwargs:
        kwargs["beta_true"] = tuple(kwargs["beta_true"])
    try:
        config = SimConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sim section invalid: {exc}") from exc
    obs, truth = generate_dataset(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_observations(obs, out_dir / "observations.csv",
                       out_dir / "locations.csv", out_dir / "times.csv")
    # truth: dense field grid plus scalar components
    grid = np.linspace(0.0, 1.0, 41)
    pts = np.array([(a, b) for a in grid for b in grid])
    with open(out_dir / "truth_field.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "t", "f"])
        for t in np.linspace(0.0, config.t_max, config.n_times):
            vals = truth["field"](pts, np.full(len(pts), t))
            for (x, yv), v in zip(pts, vals):
                w.writerow([repr(float(x)), repr(float(yv)),
                            repr(float(t)), repr(float(v))])
    scalars = {
        "beta": truth["beta"].tolist(),
        "group_effects": truth["group_effects"].tolist(),
        "sigma": truth["sigma"],
        "sigma_b": truth["sigma_b"],
        "seed": config.seed,
    }
    with open(out_dir / "truth.json", "w") as fh:
        json.dump(scalars, fh, indent=1)
        fh.write("\n")
    return 0


def _load_problem(cfg: dict, args):
    obs = load_observations(args.observations, args.locations, args.times)
    mesh, basis = _build_geometry(cfg)
    pde = _build_pde(cfg, mesh)
    return obs, build_components(obs, mesh, basis, pde)


def cmd_fit(cfg: dict, args) -> int:
    obs, comps = _load_problem(cfg, args)
    lam = cfg["lambda"]
    if "space" not in lam or "time" not in lam:
        raise ConfigError("cmd fit requires fixed lambda.space/lambda.time")
    fit = fit_components(comps, float(lam["space"]), float(lam["time"]),
                         _fit_options(cfg))
    write_fit_file(args.out, fit, cfg)
    return 0


def cmd_gcv(cfg: dict, args, threads: int) -> int:
    obs, comps = _load_problem(cfg, args)
    lam = cfg["lambda"]
    space_grid = lam.get("space_grid")
    space_grid = np.asarray(space_grid, dtype=float) if space_grid \
        else np.logspace(-6, 0, 5)
    time_grid = lam.get("time_grid")
    time_grid = np.asarray(time_grid, dtype=float) if time_grid \
        else np.logspace(-6, 0, 5)
    scan, best = gcv_select(comps, space_grid, time_grid,
                            _fit_options(cfg), threads=threads)
    with open(args.out_scan, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda_D", "lambda_T", "gcv", "edf"])
        for ls, lt, score, edf in scan.as_rows():
            w.writerow([repr(float(ls)), repr(float(lt)),
                        repr(float(score)), repr(float(edf))])
    if args.out_fit:
        write_fit_file(args.out_fit, best, cfg)
    return 0


def cmd_predict(args) -> int:
    doc = read_fit_file(args.fit)
    mesh_cfg, time_cfg = doc["mesh"], doc["time"]
    if mesh_cfg["mode"] == "unit_square":
        mesh = unit_square_mesh(mesh_cfg["subdivisions"])
    else:
        mesh = read_mesh_csv(mesh_cfg["nodes"], mesh_cfg["triangles"])
    basis = cubic_spline_basis(time_cfg["n_basis"], time_cfg["t_max"])
    fe = FieldEvaluator(mesh, basis,
                        np.asarray(doc["field_coeffs"], dtype=float))
    try:
        w_str, h_str = args.grid.lower().split("x")
        nx, ny = int(w_str), int(h_str)
        if nx < 1 or ny < 1:
            raise ValueError
    except ValueError as exc:
        raise ConfigError(
            f"bad grid size {args.grid!r}, expected WxH") from exc
    times = [float(t) for t in args.times.split(",")]
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    gx = np.linspace(lo[0], hi[0], nx)
    gy = np.linspace(lo[1], hi[1], ny)
    pts = np.array([(a, b) for a in gx for b in gy])
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "t", "value"])
        for t in times:
            vals = fe(pts, np.full(len(pts), t), outside="nan")
            for (x, yv), v in zip(pts, vals):
                w.writerow([repr(float(x)), repr(float(yv)), repr(float(t)),
                            "" if math.isnan(v) else repr(float(v))])
    return 0


def cmd_report(cfg: dict, args) -> int:
    doc = read_fit_file(args.fit)
    fit = _fit_from_doc(doc)
    obs, comps = _load_problem(cfg, args)
    text = inference_report(comps, fit, level=args.level)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixfem",
        description="Spatio-temporal mixed-effects regression with "
                    "PDE-informed finite element smoothing.")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: MIXFEM_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="draw a synthetic dataset")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out-dir", required=True)

    def add_data_args(p):
        p.add_argument("--observations", required=True)
        p.add_argument("--locations", required=True)
        p.add_argument("--times", required=True)

    p_fit = sub.add_parser("fit", help="fit at fixed smoothing parameters")
    p_fit.add_argument("--config", required=True)
    add_data_args(p_fit)
    p_fit.add_argument("--out", required=True)

    p_gcv = sub.add_parser("gcv", help="smoothing-parameter grid scan")
    p_gcv.add_argument("--config", required=True)
    add_data_args(p_gcv)
    p_gcv.add_argument("--out-scan", required=True)
    p_gcv.add_argument("--out-fit", default=None)

    p_pred = sub.add_parser("predict", help="evaluate a fitted field")
    p_pred.add_argument("--fit", required=True)
    p_pred.add_argument("--grid", required=True, metavar="WxH")
    p_pred.add_argument("--times", required=True,
                        help="comma-separated time values")
    p_pred.add_argument("--out", required=True)

    p_rep = sub.add_parser("report", help="inference summary for a fit")
    p_rep.add_argument("--config", required=True)
    add_data_args(p_rep)
    p_rep.add_argument("--fit", required=True)
    p_rep.add_argument("--level", type=float, default=0.99)
    p_rep.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads if args.threads is not None else default_threads()
    try:
        if args.command == "predict":
            return cmd_predict(args)
        cfg = load_config(args.config)
        if args.threads is None and cfg.get("threads") is not None:
            threads = cfg["threads"]
        if args.command == "simulate":
            return cmd_simulate(cfg, args.seed, Path(args.out_dir))
        if args.command == "fit":
            return cmd_fit(cfg, args)
        if args.command == "gcv":
            return cmd_gcv(cfg, args, threads)
        if args.command == "report":
            return cmd_report(cfg, args)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, DataError, MeshError, SplineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, GcvError, CovarianceError, InferenceError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
