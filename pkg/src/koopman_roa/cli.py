"""Command-line front end: simulation, fitting, analysis, classification.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 empty
analytical result (nothing found, nothing usable, empty contour).

Option precedence is flags over config file over defaults; a config file is
a flat JSON object whose keys are the long option names of any subcommand
(dashes or underscores both accepted). All randomness derives from --seed:
initial conditions use seed, the train/test split uses seed + 1.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, dynamics, edmd, pipeline, roa

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_EMPTY = 4

DEFAULT_T_FINAL = {"competition": 20.0, "mak": 40.0}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_box(text: str, n: int) -> np.ndarray:
    """Parse 'lo,hi x lo,hi x ...' into an (n, 2) array."""
    parts = [p for p in text.replace(" ", "").split("x") if p]
    if len(parts) == 1 and n > 1:
        parts = parts * n
    if len(parts) != n:
        raise CliError(EXIT_USAGE, f"box needs {n} 'lo,hi' groups separated by 'x', got {text!r}")
    rows = []
    for part in parts:
        try:
            lo, hi = (float(v) for v in part.split(","))
        except ValueError as exc:
            raise CliError(EXIT_USAGE, f"bad box component {part!r}") from exc
        if hi <= lo:
            raise CliError(EXIT_USAGE, f"box component {part!r} has hi <= lo")
        rows.append((lo, hi))
    return np.asarray(rows, dtype=float)


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v != "")
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v != "")
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"expected comma-separated integers, got {text!r}") from exc


def _build_model(args) -> dynamics.OdeModel:
    name = args.model
    if name not in dynamics.BUILTIN_MODELS:
        raise CliError(EXIT_USAGE, f"unknown model {name!r}; choose from "
                       f"{sorted(dynamics.BUILTIN_MODELS)}")
    if name == "competition":
        r = _floats(args.r) if args.r else dynamics.COMPETITION_R
        if len(r) != 6:
            raise CliError(EXIT_USAGE, "competition model needs 6 rate constants")
        return dynamics.competition_model(r)
    k = _floats(args.k) if args.k else dynamics.MAK_K
    if len(k) != 4:
        raise CliError(EXIT_USAGE, "mak model needs 4 rate constants")
    d = args.d if args.d is not None else dynamics.MAK_D
    return dynamics.mak_model(k, d)


def _simulate_dataset(args) -> dynamics.TrajectoryDataset:
    model = _build_model(args)
    if args.count < 1:
        raise CliError(EXIT_USAGE, "--count must be >= 1")
    if args.dt <= 0:
        raise CliError(EXIT_USAGE, "--dt must be positive")
    box = _parse_box(args.box, model.n) if args.box else model.ic_box
    t_final = args.t_final if args.t_final is not None else DEFAULT_T_FINAL[args.model]
    steps = args.steps if args.steps is not None else max(1, round(t_final / args.dt))
    ics = dynamics.sample_initial_conditions(box, args.count, args.seed)
    try:
        return dynamics.simulate(model, ics, args.dt, steps, seed=args.seed)
    except dynamics.SimulationError as exc:
        raise CliError(EXIT_NUMERICAL, str(exc)) from exc


def _load_dataset(path) -> dynamics.TrajectoryDataset:
    if not Path(path).exists():
        raise CliError(EXIT_USAGE, f"data file {path} does not exist")
    try:
        return dynamics.load_trajectories_csv(path)
    except (ValueError, OSError) as exc:
        raise CliError(EXIT_USAGE, f"cannot read trajectories from {path}: {exc}") from exc


def _load_model(path) -> edmd.KoopmanModel:
    if not Path(path).exists():
        raise CliError(EXIT_USAGE, f"model file {path} does not exist")
    try:
        return edmd.load_model(path)
    except (ValueError, edmd.FitError) as exc:
        raise CliError(EXIT_USAGE, f"cannot load model from {path}: {exc}") from exc


def _pipeline_config(args, sweep_allowed: bool = True) -> pipeline.PipelineConfig:
    kw = dict(
        family=args.family,
        p=args.p,
        q=args.q,
        tol_J=args.tol_j,
        delta_merge=args.delta_merge,
        eps_hyp=args.eps_hyp,
        eps_unit=args.eps_unit,
        rtol=args.rtol,
        envelope_radius=args.envelope,
        start_count=args.starts,
    )
    if sweep_allowed:
        kw["sweep_p"] = _ints(args.sweep_p) if args.sweep_p else ()
        kw["sweep_q"] = _floats(args.sweep_q) if args.sweep_q else ()
    if getattr(args, "resolution", None) is not None:
        kw["boundary_resolution"] = args.resolution
    if getattr(args, "axes", None):
        axes = _ints(args.axes)
        if len(axes) != 2:
            raise CliError(EXIT_USAGE, "--axes needs exactly two indices")
        kw["boundary_axes"] = (axes[0], axes[1])
    try:
        return pipeline.PipelineConfig(**kw)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc


def _fixed_point_table(reports) -> str:
    lines = ["location | J | |lambda| | class"]
    for f in reports:
        loc = ", ".join(f"{v:.4f}" for v in f.location)
        mags = ", ".join(f"{v:.4f}" for v in f.magnitudes) if f.magnitudes is not None else "-"
        flag = " [non-hyperbolic]" if f.non_hyperbolic else ""
        lines.append(f"({loc}) | {f.residual:.2e} | {mags} | {f.class_label}{flag}")
    return "\n".join(lines)


def _print_confusion(confusion: dict) -> None:
    if not confusion:
        return
    labels = sorted({k[0] for k in confusion} | {k[1] for k in confusion})
    print("confusion matrix (rows true, columns predicted):")
    print("      " + " ".join(f"{c:>5}" for c in labels))
    for t in labels:
        row = " ".join(f"{confusion.get((t, p), 0):>5}" for p in labels)
        print(f"{t:>5} {row}")


def cmd_simulate(args) -> int:
    dataset = _simulate_dataset(args)
    dynamics.save_trajectories_csv(dataset, args.out)
    samples = sum(len(t) for t in dataset.trajectories)
    print(f"wrote {len(dataset.trajectories)} trajectories ({samples} samples) to {args.out}")
    if dataset.truncated:
        print(f"{len(dataset.truncated)} trajectories truncated at the escape box")
    return EXIT_OK


def cmd_fit(args) -> int:
    dataset = _load_dataset(args.data)
    train, test = dynamics.split(dataset, args.train_fraction, args.seed + 1)
    pairs = dynamics.to_snapshots(train)
    try:
        if args.sweep_p or args.sweep_q:
            ps = _ints(args.sweep_p) if args.sweep_p else (args.p,)
            qs = _floats(args.sweep_q) if args.sweep_q else (args.q,)
            if None in ps or None in qs:
                raise CliError(EXIT_USAGE, "sweep needs both --sweep-p and --sweep-q (or --p/--q)")
            rows = edmd.pq_sweep(pairs, test, ps, qs, family=args.family, rtol=args.rtol)
            print("p | q | d | e")
            for r in rows:
                e = "failed" if not np.isfinite(r.e) else f"{r.e:.6f}"
                print(f"{r.p} | {r.q:g} | {r.d} | {e}")
            best = rows[0]
            print(f"winner: p={best.p} q={best.q:g} (d={best.d}, e={best.e:.6f})")
            p, q = best.p, best.q
        else:
            if args.p is None or args.q is None:
                raise CliError(EXIT_USAGE, "--p and --q are required unless sweeping")
            p, q = args.p, args.q
        from .basis import BasisSpec, truncated_indices

        spec = BasisSpec(family=args.family, index_set=truncated_indices(pairs.n, p, q),
                         scale=_floats(args.scale) if args.scale else (),
                         shift=_floats(args.shift) if args.shift else ())
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            model, residual = edmd.fit_with_residual(pairs, spec, rtol=args.rtol)
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
    except edmd.FitError as exc:
        raise CliError(EXIT_NUMERICAL, str(exc)) from exc
    report = edmd.empirical_error(model, test)
    edmd.save_model(model, args.out)
    print(f"dictionary size d={model.d}, fit residual {residual:.3e}, "
          f"empirical error e={report.e:.6f} on {report.N_s} held-out trajectories")
    print(f"model written to {args.out}")
    return EXIT_OK


def _analysis_report(args, model) -> pipeline.PipelineReport:
    dataset = _load_dataset(args.data)
    if dataset.trajectories[0].shape[1] != model.n:
        raise CliError(EXIT_USAGE, f"data dimension {dataset.trajectories[0].shape[1]} "
                       f"does not match model dimension {model.n}")
    train, test = dynamics.split(dataset, args.train_fraction, args.seed + 1)
    config = _pipeline_config(args, sweep_allowed=False)
    try:
        return pipeline.analyze_model(model, dynamics.to_snapshots(train), test, config,
                                      train_data=train)
    except pipeline.PipelineError as exc:
        raise CliError(EXIT_EMPTY, str(exc)) from exc


def cmd_fixed_points(args) -> int:
    model = _load_model(args.model_file)
    dataset = _load_dataset(args.data)
    pairs = dynamics.to_snapshots(dataset)
    config = _pipeline_config(args, sweep_allowed=False)
    starts = roa.default_starts(model, pairs.X, pairs.Y, config.start_count)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        found = roa.find_fixed_points(model, starts, config.tol_J, config.delta_merge)
    sub = pairs.X[:, :: max(1, pairs.N // 20000)]
    found = [f for f in found
             if np.min(np.linalg.norm(sub - f.location[:, None], axis=0)) <= config.envelope_radius]
    if not found:
        raise CliError(EXIT_EMPTY, "no fixed points located within the data envelope")
    roa.fill_stability(model, found, config.eps_hyp)
    print(_fixed_point_table(found))
    if args.out:
        payload = [{"location": [float(v) for v in f.location],
                    "residual": float(f.residual),
                    "magnitudes": [float(v) for v in f.magnitudes],
                    "class": f.class_label} for f in found]
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_classify(args) -> int:
    model = _load_model(args.model_file)
    report = _analysis_report(args, model)
    if not report.classifiers and report.saddles():
        raise CliError(EXIT_EMPTY, "no usable classifier")
    if args.points:
        if not Path(args.points).exists():
            raise CliError(EXIT_USAGE, f"points file {args.points} does not exist")
        try:
            pts = np.loadtxt(args.points, delimiter=",", skiprows=1, ndmin=2)
        except ValueError as exc:
            raise CliError(EXIT_USAGE, f"cannot parse points file: {exc}") from exc
        if pts.shape[1] != model.n:
            raise CliError(EXIT_USAGE, f"points have dimension {pts.shape[1]}, "
                           f"model expects {model.n}")
        X = pts.T
        if report.classifiers:
            labels, scores = roa.classify_points(report.classifiers, X, report.fallback)
        else:
            labels = np.full(X.shape[1], report.fallback)
            scores = np.zeros(X.shape[1])
        pipeline.save_labels_csv(args.out, X, labels, scores)
        print(f"labeled {X.shape[1]} points into {args.out}")
    else:
        pipeline.save_labels_csv(args.out, report.final_points,
                                 report.final_labels, report.final_scores)
        print(f"labeled {report.final_points.shape[1]} held-out initial conditions "
              f"into {args.out}")
        if report.final_accuracy is not None:
            print(f"accuracy vs trajectory-derived truth: {report.final_accuracy:.3f}")
            _print_confusion(report.confusion)
    return EXIT_OK


def cmd_boundary(args) -> int:
    model = _load_model(args.model_file)
    if model.n != 2 and not args.axes:
        raise CliError(EXIT_USAGE, "--axes is required for models with more than 2 states")
    report = _analysis_report(args, model)
    if args.phi_index is not None:
        if not 0 <= args.phi_index < model.d:
            raise CliError(EXIT_USAGE, f"--phi-index out of range 0..{model.d - 1}")
        phi = roa.UnitaryEigenfunction(
            model=model, kind="direct", indices=(args.phi_index,),
            mu_bar=complex(model.mu[args.phi_index]),
        )
        saddles = report.saddles()
        anchor = saddles[0].location if saddles else report.fixed_points[0].location
        level = float(phi.eval(anchor).real)
    elif report.classifiers:
        if not 0 <= args.classifier < len(report.classifiers):
            raise CliError(EXIT_USAGE, f"--classifier index out of range "
                           f"0..{len(report.classifiers) - 1}")
        clf = report.classifiers[args.classifier]
        phi, level = clf.phi_plus, clf.c
    else:
        raise CliError(EXIT_EMPTY, "no boundary to estimate: single-basin system")
    axes = tuple(_ints(args.axes)) if args.axes else (0, 1)
    box = _parse_box(args.box, 2) if args.box else None
    if box is None:
        pts = np.hstack([t.T for t in _load_dataset(args.data).trajectories])
        box = np.array([[pts[axes[0]].min(), pts[axes[0]].max()],
                        [pts[axes[1]].min(), pts[axes[1]].max()]])
    frozen = None
    if model.n > 2:
        frozen = np.asarray(_floats(args.frozen)) if args.frozen else None
        if frozen is None:
            saddles = report.saddles()
            frozen = saddles[0].location if saddles else report.fixed_points[0].location
        if len(frozen) != model.n:
            raise CliError(EXIT_USAGE, f"--frozen needs {model.n} values")
    grid = roa.boundary_grid(model, phi, level, box,
                             resolution=args.resolution or 200, axes=axes, frozen=frozen)
    if len(grid.contour) == 0:
        raise CliError(EXIT_EMPTY, grid.note or "empty contour")
    pipeline.save_boundary_csv(args.out, grid)
    print(f"wrote {args.resolution or 200}x{args.resolution or 200} grid with "
          f"{len(grid.contour)} contour points to {args.out}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    dataset = _simulate_dataset(args)
    if args.per_basin:
        counts = _ints(args.per_basin)
        if len(counts) != 2:
            raise CliError(EXIT_USAGE, "--per-basin needs 'train,test' counts")
        try:
            train, test = pipeline.prepare_balanced(dataset, counts[0], counts[1])
        except ValueError as exc:
            raise CliError(EXIT_NUMERICAL, str(exc)) from exc
    else:
        train, test = dynamics.split(dataset, args.train_fraction, args.seed + 1)
    config = _pipeline_config(args)
    try:
        report = pipeline.run_pipeline(train, test, config, out_dir=args.out_dir)
    except pipeline.PipelineError as exc:
        code = EXIT_NUMERICAL if exc.stage == "fit" else EXIT_EMPTY
        raise CliError(code, str(exc)) from exc
    if report.sweep:
        best = report.sweep[0]
        print(f"sweep winner: p={best.p} q={best.q:g} (d={best.d}, e={best.e:.6f})")
    print(f"empirical error e={report.empirical_error:.6f}")
    print(_fixed_point_table(report.fixed_points))
    for clf in report.classifiers:
        print(f"classifier -> basin {clf.target}: kind={clf.phi_plus.kind}, "
              f"sigma={clf.sigma:+d}, c={clf.c:.6g}, "
              f"calibration accuracy {clf.training_accuracy:.3f}")
    if report.fallback is not None:
        print(f"fallback basin: {report.fallback}")
    if report.final_accuracy is not None:
        print(f"final label accuracy: {report.final_accuracy:.3f}")
        _print_confusion(report.confusion)
    for note in report.notes:
        print(f"note: {note}")
    if args.out_dir:
        print(f"artifacts written to {args.out_dir}")
    return EXIT_OK


def _add_sim_options(sp, require_out: bool):
    sp.add_argument("--model", default=None, help="built-in model: competition or mak")
    sp.add_argument("--count", type=int, default=None, help="number of initial conditions")
    sp.add_argument("--dt", type=float, default=None, help="sampling interval")
    sp.add_argument("--steps", type=int, default=None, help="number of RK4 steps")
    sp.add_argument("--t-final", type=float, default=None,
                    help="horizon in time units (default 20 competition, 40 mak)")
    sp.add_argument("--box", default=None, help="sampling box 'lo,hi x lo,hi ...'")
    sp.add_argument("--r", default=None, help="competition rate constants, 6 values")
    sp.add_argument("--k", default=None, help="mak rate constants, 4 values")
    sp.add_argument("--d", type=float, default=None, help="mak outflow rate")
    if require_out:
        sp.add_argument("--out", default=None, help="output CSV path")


def _add_fit_options(sp):
    sp.add_argument("--family", default=None, help="polynomial family "
                    "(laguerre, hermite, legendre)")
    sp.add_argument("--p", type=int, default=None, help="maximum polynomial degree")
    sp.add_argument("--q", type=float, default=None, help="quasi-norm exponent")
    sp.add_argument("--sweep-p", default=None, help="comma-separated p candidates")
    sp.add_argument("--sweep-q", default=None, help="comma-separated q candidates")
    sp.add_argument("--rtol", type=float, default=None, help="pseudoinverse cutoff")


def _add_tolerance_options(sp):
    sp.add_argument("--tol-j", type=float, default=None, help="fixed-point acceptance on J")
    sp.add_argument("--delta-merge", type=float, default=None, help="fixed-point merge radius")
    sp.add_argument("--eps-hyp", type=float, default=None, help="non-hyperbolicity margin")
    sp.add_argument("--eps-unit", type=float, default=None, help="direct-usability margin on mu")
    sp.add_argument("--envelope", type=float, default=None,
                    help="max distance of a fixed point from the data")
    sp.add_argument("--starts", type=int, default=None, help="optimizer start count per family")


DEFAULTS = {
    "simulate": {"model": "competition", "count": 200, "dt": 0.1, "seed": 7,
                 "out": "trajectories.csv"},
    "fit": {"family": "laguerre", "train_fraction": 0.5, "seed": 7, "rtol": edmd.DEFAULT_RTOL,
            "out": "model.kpm"},
    "fixed-points": {"family": "laguerre", "seed": 7, "rtol": edmd.DEFAULT_RTOL,
                     "tol_j": roa.DEFAULT_TOL_J, "delta_merge": roa.DEFAULT_MERGE,
                     "eps_hyp": roa.DEFAULT_EPS_HYP, "eps_unit": roa.DEFAULT_EPS_UNIT,
                     "envelope": 0.4, "starts": 64, "train_fraction": 1.0, "p": 4, "q": 2.0},
    "classify": {"family": "laguerre", "seed": 7, "rtol": edmd.DEFAULT_RTOL,
                 "tol_j": roa.DEFAULT_TOL_J, "delta_merge": roa.DEFAULT_MERGE,
                 "eps_hyp": roa.DEFAULT_EPS_HYP, "eps_unit": roa.DEFAULT_EPS_UNIT,
                 "envelope": 0.4, "starts": 64, "train_fraction": 0.5, "p": 4, "q": 2.0,
                 "out": "labels.csv"},
    "boundary": {"family": "laguerre", "seed": 7, "rtol": edmd.DEFAULT_RTOL,
                 "tol_j": roa.DEFAULT_TOL_J, "delta_merge": roa.DEFAULT_MERGE,
                 "eps_hyp": roa.DEFAULT_EPS_HYP, "eps_unit": roa.DEFAULT_EPS_UNIT,
                 "envelope": 0.4, "starts": 64, "train_fraction": 0.5, "p": 4, "q": 2.0,
                 "resolution": 200, "classifier": 0, "out": "boundary.csv"},
    "pipeline": {"model": "competition", "count": 200, "dt": 0.1, "seed": 7,
                 "family": "laguerre", "train_fraction": 0.5, "rtol": edmd.DEFAULT_RTOL,
                 "tol_j": roa.DEFAULT_TOL_J, "delta_merge": roa.DEFAULT_MERGE,
                 "eps_hyp": roa.DEFAULT_EPS_HYP, "eps_unit": roa.DEFAULT_EPS_UNIT,
                 "envelope": 0.4, "starts": 64, "p": 4, "q": 2.0},
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="koopman-roa",
        description="Estimate regions of attraction from trajectory data "
                    "via a spectral Koopman surrogate.",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="integrate a built-in model from random starts")
    _add_sim_options(sp, require_out=True)
    sp.add_argument("--seed", type=int, default=None, help="seed for initial conditions")
    sp.add_argument("--config", default=None, help="JSON file with option defaults")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit a Koopman model to a trajectory CSV")
    sp.add_argument("--data", required=True, help="trajectory CSV from simulate")
    _add_fit_options(sp)
    sp.add_argument("--scale", default=None, help="per-coordinate domain scale")
    sp.add_argument("--shift", default=None, help="per-coordinate domain shift")
    sp.add_argument("--train-fraction", "--split", dest="train_fraction", type=float,
                    default=None, help="fraction of trajectories used for fitting")
    sp.add_argument("--seed", type=int, default=None, help="split uses seed + 1")
    sp.add_argument("--out", default=None, help="model file path")
    sp.add_argument("--config", default=None, help="JSON file with option defaults")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("fixed-points", help="locate and classify fixed points of a model")
    sp.add_argument("--model-file", required=True)
    sp.add_argument("--data", required=True, help="trajectory CSV supplying optimizer starts")
    _add_fit_options(sp)
    _add_tolerance_options(sp)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--train-fraction", type=float, default=None)
    sp.add_argument("--out", default=None, help="optional JSON report path")
    sp.add_argument("--config", default=None, help="JSON file with option defaults")
    sp.set_defaults(func=cmd_fixed_points)

    sp = sub.add_parser("classify", help="label points by predicted basin of attraction")
    sp.add_argument("--model-file", required=True)
    sp.add_argument("--data", required=True, help="trajectory CSV for calibration")
    sp.add_argument("--points", default=None, help="CSV of states to label (x1..xn header)")
    _add_fit_options(sp)
    _add_tolerance_options(sp)
    sp.add_argument("--seed", type=int, default=None, help="split uses seed + 1")
    sp.add_argument("--train-fraction", type=float, default=None)
    sp.add_argument("--out", default=None, help="labels CSV path")
    sp.add_argument("--config", default=None, help="JSON file with option defaults")
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("boundary", help="export a basin-boundary grid as CSV")
    sp.add_argument("--model-file", required=True)
    sp.add_argument("--data", required=True, help="trajectory CSV for calibration")
    _add_fit_options(sp)
    _add_tolerance_options(sp)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--train-fraction", type=float, default=None)
    sp.add_argument("--axes", default=None, help="two state indices spanning the grid")
    sp.add_argument("--frozen", default=None, help="values for the remaining coordinates")
    sp.add_argument("--box", default=None, help="grid box 'lo,hi x lo,hi'")
    sp.add_argument("--resolution", type=int, default=None, help="grid points per axis")
    sp.add_argument("--classifier", type=int, default=None,
                    help="which classifier's boundary to export")
    sp.add_argument("--phi-index", type=int, default=None,
                    help="bypass classifier choice and grid one raw eigenfunction")
    sp.add_argument("--out", default=None, help="grid CSV path")
    sp.add_argument("--config", default=None, help="JSON file with option defaults")
    sp.set_defaults(func=cmd_boundary)

    sp = sub.add_parser("pipeline", help="simulate, fit, analyze, classify in one run")
    _add_sim_options(sp, require_out=False)
    _add_fit_options(sp)
    _add_tolerance_options(sp)
    sp.add_argument("--seed", type=int, default=None,
                    help="initial conditions use seed, the split uses seed + 1")
    sp.add_argument("--train-fraction", type=float, default=None)
    sp.add_argument("--per-basin", default=None,
                    help="'train,test' trajectory counts per basin (balanced mode)")
    sp.add_argument("--out-dir", default=None, help="directory for artifacts")
    sp.add_argument("--config", default=None, help="JSON file with option defaults")
    sp.set_defaults(func=cmd_pipeline)
    return ap


def _apply_config(args) -> None:
    """Fill unset options from the config file, then from built-in defaults."""
    merged = dict(DEFAULTS.get(args.command, {}))
    path = getattr(args, "config", None)
    if path:
        if not Path(path).exists():
            raise CliError(EXIT_USAGE, f"config file {path} does not exist")
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_USAGE, f"cannot parse config file {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError(EXIT_USAGE, "config file must hold a JSON object")
        for key, value in loaded.items():
            merged[key.replace("-", "_")] = value
    for key, value in merged.items():
        if getattr(args, key, None) is None and hasattr(args, key):
            setattr(args, key, value)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        _apply_config(args)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (edmd.FitError, dynamics.SimulationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except roa.RoaError as exc:
        print(f"empty result: {exc}", file=sys.stderr)
        return EXIT_EMPTY


if __name__ == "__main__":
    sys.exit(main())
