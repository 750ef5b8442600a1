"""End-to-end analysis: fit, fixed points, stability, classifiers, boundaries.

The stages run in a fixed order and each one's artifacts are recorded in the
report as soon as the stage finishes, so a failure still leaves the partial
results available (and written to disk when an output directory is given).
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np

from . import edmd, roa
from .basis import BasisSpec, truncated_indices
from .dynamics import SnapshotPairs, TrajectoryDataset, endpoint_clusters, to_snapshots
from .edmd import KoopmanModel

REPORT_FORMAT = "koopman-roa/report"
REPORT_VERSION = 1


class PipelineError(RuntimeError):
    """A stage failed; carries the stage name and the partial report."""

    def __init__(self, stage: str, message: str, report: "PipelineReport"):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage
        self.report = report


@dataclass
class PipelineConfig:
    family: str = "laguerre"
    p: int | None = None
    q: float | None = None
    sweep_p: tuple[int, ...] = ()
    sweep_q: tuple[float, ...] = ()
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None
    tol_J: float = roa.DEFAULT_TOL_J
    delta_merge: float = roa.DEFAULT_MERGE
    eps_hyp: float = roa.DEFAULT_EPS_HYP
    eps_unit: float = roa.DEFAULT_EPS_UNIT
    rtol: float = edmd.DEFAULT_RTOL
    start_count: int = 64
    envelope_radius: float = 0.4
    boundary_resolution: int = 200
    boundary_axes: tuple[int, int] = (0, 1)
    max_pair_candidates: int = 6

    def __post_init__(self):
        for name in ("tol_J", "delta_merge", "eps_hyp", "eps_unit", "rtol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.sweep_p and self.p is None:
            raise ValueError("either p or sweep_p must be given")
        if not self.sweep_q and self.q is None:
            raise ValueError("either q or sweep_q must be given")


@dataclass
class PipelineReport:
    model: KoopmanModel | None = None
    sweep: list = field(default_factory=list)
    empirical_error: float | None = None
    fixed_points: list = field(default_factory=list)
    candidates: list = field(default_factory=list)
    unitary: list = field(default_factory=list)
    classifiers: list = field(default_factory=list)
    fallback: int | None = None
    analysis_accuracy: float | None = None
    final_accuracy: float | None = None
    final_points: np.ndarray | None = None
    final_labels: np.ndarray | None = None
    final_scores: np.ndarray | None = None
    final_truth: np.ndarray | None = None
    confusion: dict = field(default_factory=dict)
    boundaries: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def stable_points(self) -> list[roa.FixedPointReport]:
        return [f for f in self.fixed_points if f.stability == roa.ASYMPTOTICALLY_STABLE]

    def saddles(self) -> list[roa.FixedPointReport]:
        return [f for f in self.fixed_points if f.stability == roa.SADDLE]

    def to_dict(self) -> dict:
        def fp(f):
            return {
                "location": [float(v) for v in f.location],
                "residual": float(f.residual),
                "magnitudes": [float(v) for v in f.magnitudes] if f.magnitudes is not None else None,
                "class": f.class_label,
                "margin": None if f.margin is None else float(f.margin),
                "non_hyperbolic": bool(f.non_hyperbolic),
            }

        def clf(c):
            return {
                "target": int(c.target),
                "sigma": int(c.sigma),
                "threshold": float(c.c),
                "saddle": [float(v) for v in c.saddle],
                "kind": c.phi_plus.kind,
                "indices": list(c.phi_plus.indices),
                "mu_bar": [float(c.phi_plus.mu_bar.real), float(c.phi_plus.mu_bar.imag)],
                "training_accuracy": float(c.training_accuracy),
            }

        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "sweep": [
                {"p": r.p, "q": r.q, "d": r.d,
                 "e": (None if not np.isfinite(r.e) else float(r.e)), "note": r.note}
                for r in self.sweep
            ],
            "empirical_error": None if self.empirical_error is None else float(self.empirical_error),
            "fixed_points": [fp(f) for f in self.fixed_points],
            "candidates": [
                {"index": c.index, "mu": [float(c.mu.real), float(c.mu.imag)],
                 "direct_usable": bool(c.direct_usable)}
                for c in self.candidates
            ],
            "classifiers": [clf(c) for c in self.classifiers],
            "fallback": self.fallback,
            "analysis_accuracy": self.analysis_accuracy,
            "final_accuracy": self.final_accuracy,
            "confusion": {str(k): v for k, v in sorted(self.confusion.items())},
            "boundaries": [
                {"axes": list(b.axes), "level": float(b.level),
                 "contour_points": int(len(b.contour)), "note": b.note}
                for b in self.boundaries
            ],
            "notes": list(self.notes),
            "timings": {k: round(v, 3) for k, v in self.timings.items()},
        }


def label_endpoints(dataset: TrajectoryDataset, stable_points, radius: float) -> np.ndarray:
    """Basin label per trajectory: nearest stable point within radius, else -1."""
    centers = np.atleast_2d(np.asarray(stable_points, dtype=float))
    labels = np.full(len(dataset.trajectories), -1)
    for t, traj in enumerate(dataset.trajectories):
        d = np.linalg.norm(centers - traj[-1][None, :], axis=1)
        j = int(np.argmin(d))
        if d[j] <= radius:
            labels[t] = j
    return labels


def _stratified_halves(labels: np.ndarray):
    """Alternate members of each label group into two index lists."""
    first, second = [], []
    for lab in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == lab)
        first.extend(idx[0::2].tolist())
        second.extend(idx[1::2].tolist())
    return sorted(first), sorted(second)


def prepare_balanced(dataset: TrajectoryDataset, per_basin_train: int,
                     per_basin_test: int, radius: float = 0.1):
    """Split a large simulated pool into basin-balanced train and test sets.

    Basins are identified by endpoint clustering; only trajectories in the
    largest clusters with enough members are used. Raises if any retained
    basin cannot fill its quota.
    """
    labels, _ = endpoint_clusters(dataset, radius=radius)
    need = per_basin_train + per_basin_test
    train_idx, test_idx = [], []
    kept = 0
    for lab in range(labels.max() + 1):
        idx = np.flatnonzero(labels == lab)
        if len(idx) < need:
            continue
        kept += 1
        train_idx.extend(idx[:per_basin_train].tolist())
        test_idx.extend(idx[per_basin_train:need].tolist())
    if kept == 0:
        raise ValueError(f"no endpoint cluster has {need} trajectories")

    def subset(ids):
        ids = sorted(ids)
        return TrajectoryDataset(
            dt=dataset.dt,
            ids=[dataset.ids[i] for i in ids],
            trajectories=[dataset.trajectories[i] for i in ids],
            seed=dataset.seed,
            truncated={i: dataset.truncated[i] for i in ids if i in dataset.truncated},
        )

    return subset(train_idx), subset(test_idx)


def _fit_stage(train_pairs: SnapshotPairs, test: TrajectoryDataset,
               config: PipelineConfig, report: PipelineReport) -> KoopmanModel:
    n = train_pairs.X.shape[0]
    scale = () if config.scale is None else tuple(config.scale)
    shift = () if config.shift is None else tuple(config.shift)
    if config.sweep_p or config.sweep_q:
        ps = tuple(config.sweep_p) or (config.p,)
        qs = tuple(config.sweep_q) or (config.q,)
        rows = edmd.pq_sweep(train_pairs, test, ps, qs,
                             family=config.family, rtol=config.rtol)
        report.sweep = rows
        p, q = rows[0].p, rows[0].q
    else:
        p, q = config.p, config.q
    spec = BasisSpec(
        family=config.family,
        index_set=truncated_indices(n, p, q),
        scale=scale,
        shift=shift,
    )
    return edmd.fit(train_pairs, spec, rtol=config.rtol)


def _build_unitary_pool(model, candidates, stable_locs, config, report):
    """Candidate composed eigenfunctions ordered by expected reliability.

    With a single nontrivial near-unit eigenvalue the direct eigenfunction is
    the natural boundary function and leads the pool. With several, the unit
    eigenspace is numerically degenerate and single eigenvectors come out as
    arbitrary mixtures of basin indicators, so they are dropped in favor of
    indicator combinations anchored at the located stable points, which span
    the same subspace. Product pairs are composed from modes away from the
    unit circle and close the list. The order only breaks ties; the
    cross-validated selection does the real ranking.
    """
    directs: list[roa.UnitaryEigenfunction] = []
    for c in candidates:
        if c.direct_usable:
            try:
                directs.append(roa.construct_unitary(model, c.index, eps_unit=config.eps_unit))
            except roa.RoaError:
                continue
    combos: list[roa.UnitaryEigenfunction] = []
    if len(stable_locs) >= 2:
        try:
            combos = roa.combine_near_unit(model, stable_locs, config.eps_unit)
        except roa.RoaError as exc:
            report.notes.append(f"indicator combination unavailable: {exc}")
    pairs: list[roa.UnitaryEigenfunction] = []
    real_pos = [c for c in candidates
                if abs(c.mu.imag) <= 1e-12 * max(1.0, abs(c.mu))
                and c.mu.real > 0 and abs(c.mu - 1.0) >= config.eps_unit]
    above = sorted([c for c in real_pos if c.mu.real > 1], key=lambda c: -c.mu.real)
    below = sorted([c for c in real_pos if c.mu.real < 1], key=lambda c: abs(c.mu - 1.0))
    pairings = [(c1, c2) for c1 in above for c2 in below]
    if not pairings:
        side = above or below
        pairings = [(c1, c2) for c1 in side for c2 in side if c1.index != c2.index]
    for c1, c2 in pairings[: config.max_pair_candidates]:
        try:
            pairs.append(roa.construct_unitary(model, c1.index, c2.index, config.eps_unit))
        except roa.RoaError:
            continue
    if len(directs) == 1:
        return directs + combos + pairs
    if combos:
        return combos + pairs
    return directs + pairs


def _cv_folds(labels: np.ndarray):
    a, b = _stratified_halves(labels)
    return np.array(a, dtype=int), np.array(b, dtype=int)


def _phi_cv_accuracy(model, phi, saddle, X, y, target, folds) -> float:
    """Two-fold cross-validated accuracy of one eigenfunction for one basin.

    The orientation sign is recalibrated on each training fold; scoring on
    the opposite fold penalizes eigenfunctions whose threshold only works by
    chance on half the points.
    """
    accs = []
    for tr, te in (folds, folds[::-1]):
        try:
            clf = roa.build_classifier(model, phi, saddle, X[:, tr], y[tr], target)
        except roa.RoaError:
            return -1.0
        accs.append(float((clf.decide(X[:, te]) == (y[te] == target)).mean()))
    return float(np.mean(accs))


def _best_decision_list(model, pool, saddles, stable_labels, points, labels, report):
    """Search saddle-to-basin assignments and eigenfunction choices.

    Eigenfunctions are chosen per (saddle, basin) by cross-validated accuracy
    on the analysis points; assignments are scored by the cross-validated
    accuracy of the whole decision list, with an untargeted basin serving as
    fallback. Ties keep the earliest (most structured) pool entry.
    """
    resolved = labels >= 0
    Xr, yr = points[:, resolved], labels[resolved]
    folds = _cv_folds(yr)
    n_s, n_t = len(saddles), len(stable_labels)

    choice = {}
    for s_pos, saddle in enumerate(saddles):
        for t_pos, target in enumerate(stable_labels):
            scored = [(i, _phi_cv_accuracy(model, phi, saddle, Xr, yr, target, folds))
                      for i, phi in enumerate(pool)]
            i_best, acc = max(scored, key=lambda t: (t[1], -t[0]))
            if acc > 0.5:
                choice[s_pos, t_pos] = (pool[i_best], acc)

    best = None
    for order in permutations(range(n_t), min(n_s, max(n_t - 1, 1))):
        if any((s, t) not in choice for s, t in enumerate(order)):
            continue
        entries = [(saddles[s], stable_labels[t], choice[s, t][0])
                   for s, t in enumerate(order)]
        cv_scores = []
        for tr, te in (folds, folds[::-1]):
            try:
                fold_clfs = [roa.build_classifier(model, phi, sad, Xr[:, tr], yr[tr], tgt)
                             for sad, tgt, phi in entries]
            except roa.RoaError:
                cv_scores = None
                break
            for fb in [stable_labels[i] for i in range(n_t) if i not in order] \
                    or [stable_labels[order[-1]]]:
                pred, _ = roa.classify_points(fold_clfs, Xr[:, te], fb)
                cv_scores.append((fb, float((pred == yr[te]).mean())))
        if not cv_scores:
            continue
        for fb in {f for f, _ in cv_scores}:
            acc = float(np.mean([a for f, a in cv_scores if f == fb]))
            if best is None or acc > best[0]:
                best = (acc, entries, fb)
    if best is None:
        return None

    _, entries, fb = best
    try:
        clfs = [roa.build_classifier(model, phi, sad, Xr, yr, tgt)
                for sad, tgt, phi in entries]
    except roa.RoaError:
        return None
    pred, _ = roa.classify_points(clfs, Xr, fb)
    return float((pred == yr).mean()), clfs, fb


def run_pipeline(train, test: TrajectoryDataset, config: PipelineConfig,
                 out_dir: str | Path | None = None) -> PipelineReport:
    """Fit, locate and classify fixed points, build classifiers, label, grid.

    train may be a TrajectoryDataset or precomputed SnapshotPairs; test must
    be a TrajectoryDataset since held-out accuracy comes from its endpoints.
    """
    report = PipelineReport()
    stage = "fit"
    t0 = time.perf_counter()
    train_data = train if isinstance(train, TrajectoryDataset) else None
    try:
        train_pairs = train if isinstance(train, SnapshotPairs) else to_snapshots(train)
        model = _fit_stage(train_pairs, test, config, report)
        report.model = model
    except (edmd.FitError, ValueError) as exc:
        _persist(report, None, out_dir)
        raise PipelineError(stage, str(exc), report) from exc
    report.timings[stage] = time.perf_counter() - t0
    return analyze_model(model, train_pairs, test, config, report=report,
                         out_dir=out_dir, train_data=train_data)


def analyze_model(model: KoopmanModel, train_pairs: SnapshotPairs,
                  test: TrajectoryDataset, config: PipelineConfig,
                  report: PipelineReport | None = None,
                  out_dir: str | Path | None = None,
                  train_data: TrajectoryDataset | None = None) -> PipelineReport:
    """Post-fit stages: fixed points, stability, classifiers, labels, grids."""
    if report is None:
        report = PipelineReport(model=model)

    stage = "error"

    def _fail(msg):
        _persist(report, model, out_dir)
        raise PipelineError(stage, msg, report)

    t0 = time.perf_counter()
    err = edmd.empirical_error(model, test)
    report.empirical_error = err.e
    if err.e > 0.5:
        report.notes.append(f"high empirical error {err.e:.3f}; flow predictions are weak")
    report.timings[stage] = time.perf_counter() - t0

    stage = "fixed_points"
    t0 = time.perf_counter()
    starts = roa.default_starts(model, train_pairs.X, train_pairs.Y, config.start_count)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        found = roa.find_fixed_points(model, starts, config.tol_J, config.delta_merge)
    # envelope reference: every simulated state, training and test alike
    all_states = np.hstack([train_pairs.X] + [t.T for t in test.trajectories])
    sub = all_states[:, :: max(1, all_states.shape[1] // 40000)]
    kept = []
    for f in found:
        dmin = float(np.min(np.linalg.norm(sub - f.location[:, None], axis=0)))
        if dmin <= config.envelope_radius:
            kept.append(f)
        else:
            report.notes.append(
                f"dropped fixed point {np.round(f.location, 4).tolist()}: "
                f"distance {dmin:.3f} from data exceeds envelope {config.envelope_radius}"
            )
    report.fixed_points = kept
    if not kept:
        _fail("no fixed points located within the data envelope")
    report.timings[stage] = time.perf_counter() - t0

    stage = "stability"
    t0 = time.perf_counter()
    roa.fill_stability(model, report.fixed_points, config.eps_hyp)
    stable = report.stable_points()
    if not stable:
        _fail("no asymptotically stable fixed point found")
    report.timings[stage] = time.perf_counter() - t0

    stage = "labels"
    t0 = time.perf_counter()
    stable_locs = np.array([f.location for f in stable])
    stable_labels = [i for i, f in enumerate(report.fixed_points)
                     if f.stability == roa.ASYMPTOTICALLY_STABLE]
    mapper = np.array(stable_labels + [-1])  # position -1 keeps unresolved as -1
    radius = 10.0 * config.delta_merge
    te_truth = mapper[label_endpoints(test, stable_locs, radius)]
    X_fin = np.array([traj[0] for traj in test.trajectories]).T
    y_fin = te_truth
    if train_data is not None:
        # calibrate on the labeled training trajectories, hold out all of test
        tr_truth = mapper[label_endpoints(train_data, stable_locs, radius)]
        ok = tr_truth >= 0
        X_ana = np.array([traj[0] for traj in train_data.trajectories]).T[:, ok]
        y_ana = tr_truth[ok]
    else:
        # no training trajectories given: calibrate on half of the test split
        ana_idx, fin_idx = _stratified_halves(te_truth)
        X_ana, y_ana = X_fin[:, ana_idx], te_truth[ana_idx]
        X_fin, y_fin = X_fin[:, fin_idx], te_truth[fin_idx]
    if y_ana.size == 0:
        _fail("no calibration trajectory settled near a stable fixed point")
    report.timings[stage] = time.perf_counter() - t0

    stage = "unitary"
    t0 = time.perf_counter()
    try:
        report.candidates = roa.select_unitary_candidates(model, train_pairs.X, config.eps_unit)
    except roa.RoaError as exc:
        _fail(str(exc))
    saddles = report.saddles()
    pool = _build_unitary_pool(model, report.candidates, stable_locs, config, report)
    report.unitary = pool
    if saddles and not pool:
        _fail("no unitary eigenfunction could be constructed")
    report.timings[stage] = time.perf_counter() - t0

    stage = "classifiers"
    t0 = time.perf_counter()
    if not saddles:
        report.notes.append("no boundary to estimate: single-basin system")
        report.fallback = stable_labels[0]
        pred_fin = np.full(X_fin.shape[1], report.fallback)
        scores_fin = np.zeros(X_fin.shape[1])
        report.analysis_accuracy = _accuracy(np.full(len(y_ana), report.fallback), y_ana)
    else:
        best = _best_decision_list(model, pool, saddles, stable_labels, X_ana, y_ana, report)
        if best is None:
            _fail("no saddle classifier exceeded chance accuracy on the analysis set")
        report.analysis_accuracy, report.classifiers, report.fallback = best[0], best[1], best[2]
        pred_fin, scores_fin = roa.classify_points(report.classifiers, X_fin, report.fallback)
    report.final_points = X_fin
    report.final_labels = pred_fin
    report.final_scores = scores_fin
    report.final_truth = y_fin
    resolved = y_fin >= 0
    report.final_accuracy = _accuracy(pred_fin[resolved], y_fin[resolved])
    for t, p in zip(y_fin[resolved], pred_fin[resolved]):
        key = (int(t), int(p))
        report.confusion[key] = report.confusion.get(key, 0) + 1
    report.timings[stage] = time.perf_counter() - t0

    stage = "boundary"
    t0 = time.perf_counter()
    lo = train_pairs.X.min(axis=1)
    hi = train_pairs.X.max(axis=1)
    for clf in report.classifiers:
        ia, ib = config.boundary_axes if model.n > 2 else (0, 1)
        grid = roa.boundary_grid(
            model, clf.phi_plus, clf.c,
            box=[[lo[ia], hi[ia]], [lo[ib], hi[ib]]],
            resolution=config.boundary_resolution,
            axes=(ia, ib),
            frozen=None if model.n == 2 else clf.saddle,
        )
        report.boundaries.append(grid)
        if grid.note:
            report.notes.append(f"boundary axes {ia},{ib}: {grid.note}")
    report.timings[stage] = time.perf_counter() - t0

    _persist(report, model, out_dir)
    return report


def _accuracy(pred, truth) -> float | None:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if truth.size == 0:
        return None
    return float((pred == truth).mean())


def save_labels_csv(path, points: np.ndarray, labels, scores) -> None:
    """Write classified points as x1..xn,label,score rows."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join([f"x{i + 1}" for i in range(n)] + ["label", "score"]) + "\n")
        for j in range(points.shape[1]):
            coords = ",".join(repr(float(v)) for v in points[:, j])
            fh.write(f"{coords},{int(labels[j])},{repr(float(scores[j]))}\n")


def save_boundary_csv(path, grid: roa.BoundaryGrid) -> None:
    """Grid samples as x_a,x_b,re_phi,on_contour followed by contour rows."""
    res_a, res_b = len(grid.a_values), len(grid.b_values)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x_a,x_b,re_phi,on_contour\n")
        for i in range(res_a):
            for j in range(res_b):
                fh.write(
                    f"{repr(float(grid.a_values[i]))},{repr(float(grid.b_values[j]))},"
                    f"{repr(float(grid.re_phi[i, j]))},0\n"
                )
        for pt in grid.contour:
            fh.write(f"{repr(float(pt[0]))},{repr(float(pt[1]))},{repr(float(grid.level))},1\n")


def _persist(report: PipelineReport, model, out_dir) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model is not None:
        edmd.save_model(model, out / "model.kpm")
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    if report.final_points is not None:
        save_labels_csv(out / "labels.csv", report.final_points,
                        report.final_labels, report.final_scores)
    for k, grid in enumerate(report.boundaries):
        save_boundary_csv(out / f"boundary_{k}.csv", grid)
