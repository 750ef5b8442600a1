"""End-to-end pipeline: stages, persistence, balanced splits, error paths."""
from __future__ import annotations

import json
import warnings

import numpy as np
import pytest

from koopman_roa import dynamics, pipeline, roa


def make_dataset(trajectories, dt=0.1, truncated=None):
    return dynamics.TrajectoryDataset(
        dt=dt, ids=tuple(range(len(trajectories))),
        trajectories=[np.asarray(t, dtype=float) for t in trajectories],
        truncated=truncated or {})


def test_config_validation():
    with pytest.raises(ValueError, match="p or sweep_p"):
        pipeline.PipelineConfig(q=1.0)
    with pytest.raises(ValueError, match="q or sweep_q"):
        pipeline.PipelineConfig(p=3)
    with pytest.raises(ValueError, match="positive"):
        pipeline.PipelineConfig(p=3, q=1.0, tol_J=0.0)
    cfg = pipeline.PipelineConfig(sweep_p=(2, 3), sweep_q=(1.0,))
    assert cfg.p is None


def test_label_endpoints():
    trajs = [
        [[1.0, 1.0], [1.9, 0.05]],
        [[1.0, 1.0], [0.02, 1.95]],
        [[1.0, 1.0], [1.0, 1.0]],
    ]
    labels = pipeline.label_endpoints(make_dataset(trajs),
                                      np.array([[2.0, 0.0], [0.0, 2.0]]), radius=0.15)
    assert labels.tolist() == [0, 1, -1]


def test_stratified_halves_balance():
    labels = np.array([0, 0, 0, 0, 1, 1, 1, -1, -1])
    a, b = pipeline._stratified_halves(labels)
    assert sorted(a + b) == list(range(9))
    for lab in (0, 1, -1):
        na = sum(labels[i] == lab for i in a)
        nb = sum(labels[i] == lab for i in b)
        assert abs(na - nb) <= 1


def test_prepare_balanced_quotas():
    rng = np.random.default_rng(0)
    trajs = []
    # 30 trajectories per attractor, plus 3 that settle elsewhere
    for center in ([2.0, 0.0], [0.0, 2.0]):
        for _ in range(30):
            end = np.asarray(center) + rng.normal(scale=0.01, size=2)
            trajs.append([[1.0, 1.0], end])
    for _ in range(3):
        trajs.append([[1.0, 1.0], [1.0 + rng.normal(scale=0.01), 5.0]])
    data = make_dataset(trajs)
    tr, te = pipeline.prepare_balanced(data, 20, 10, radius=0.1)
    assert len(tr) == 40 and len(te) == 20
    assert set(tr.ids).isdisjoint(te.ids)
    ltr = pipeline.label_endpoints(tr, np.array([[2.0, 0.0], [0.0, 2.0]]), 0.1)
    lte = pipeline.label_endpoints(te, np.array([[2.0, 0.0], [0.0, 2.0]]), 0.1)
    assert np.bincount(ltr).tolist() == [20, 20]
    assert np.bincount(lte).tolist() == [10, 10]
    with pytest.raises(ValueError, match="cluster"):
        pipeline.prepare_balanced(data, 40, 10)


@pytest.fixture(scope="module")
def competition_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    model = dynamics.competition_model()
    rng = np.random.default_rng(7)
    data = dynamics.simulate(model, rng.uniform(0, 2, size=(120, 2)), 0.1, 200)
    tr, te = dynamics.split(data, 0.5, 8)
    cfg = pipeline.PipelineConfig(p=5, q=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = pipeline.run_pipeline(tr, te, cfg, out_dir=out)
    return rep, out, te


def test_pipeline_stages_complete(competition_report):
    rep, _, te = competition_report
    assert rep.model is not None and rep.model.d == 21
    assert rep.empirical_error is not None
    assert len(rep.fixed_points) == 4
    classes = sorted(f.class_label for f in rep.fixed_points)
    assert classes == ["AsymptoticallyStable", "AsymptoticallyStable",
                       "Saddle(type 1)", "Unstable"]
    assert len(rep.classifiers) == 1
    assert rep.fallback in (1, 3)
    assert rep.analysis_accuracy > 0.9
    assert rep.final_accuracy > 0.9
    # the held-out set is the entire test split, in order
    np.testing.assert_array_equal(rep.final_points,
                                  np.array([t[0] for t in te.trajectories]).T)
    assert set(rep.timings) >= {"fit", "error", "fixed_points", "stability",
                                "labels", "unitary", "classifiers", "boundary"}


def test_pipeline_boundary_grid(competition_report):
    rep, _, _ = competition_report
    assert len(rep.boundaries) == 1
    grid = rep.boundaries[0]
    assert grid.re_phi.shape == (200, 200)
    assert len(grid.contour) > 100
    # the competition basin boundary is the diagonal
    dev = np.abs(grid.contour[:, 0] - grid.contour[:, 1]) / np.sqrt(2.0)
    assert dev.mean() < 0.1


def test_pipeline_confusion_counts_resolved_points(competition_report):
    rep, _, _ = competition_report
    resolved = int((rep.final_truth >= 0).sum())
    assert sum(rep.confusion.values()) == resolved
    correct = sum(v for (t, p), v in rep.confusion.items() if t == p)
    assert correct / resolved == pytest.approx(rep.final_accuracy)


def test_pipeline_artifacts_on_disk(competition_report):
    rep, out, _ = competition_report
    assert (out / "model.kpm").exists()
    assert (out / "labels.csv").exists()
    assert (out / "boundary_0.csv").exists()
    doc = json.loads((out / "report.json").read_text())
    assert doc["format"] == pipeline.REPORT_FORMAT
    assert doc["version"] == pipeline.REPORT_VERSION
    assert len(doc["fixed_points"]) == 4
    assert doc["final_accuracy"] == pytest.approx(rep.final_accuracy)
    # labels.csv has one row per held-out point
    lines = (out / "labels.csv").read_text().strip().splitlines()
    assert lines[0] == "x1,x2,label,score"
    assert len(lines) - 1 == rep.final_points.shape[1]
    # boundary csv carries both the grid and the contour rows
    blines = (out / "boundary_0.csv").read_text().strip().splitlines()
    assert blines[0] == "x_a,x_b,re_phi,on_contour"
    grid_rows = [l for l in blines[1:] if l.endswith(",0")]
    contour_rows = [l for l in blines[1:] if l.endswith(",1")]
    assert len(grid_rows) == 200 * 200
    assert len(contour_rows) == len(rep.boundaries[0].contour)


def test_pipeline_report_json_roundtrip(competition_report):
    rep, _, _ = competition_report
    doc = rep.to_dict()
    assert json.loads(json.dumps(doc)) == doc


def test_pipeline_envelope_drops_remote_fixed_points(competition_report):
    rep, _, _ = competition_report
    # every retained fixed point sits inside the sampled region
    for f in rep.fixed_points:
        assert (f.location > -0.2).all() and (f.location < 2.2).all()


def test_analyze_model_without_train_data_halves_test(competition_report):
    rep, _, te = competition_report
    cfg = pipeline.PipelineConfig(p=5, q=1.0)
    pairs = dynamics.to_snapshots(te)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep2 = pipeline.analyze_model(rep.model, pairs, te, cfg)
    # calibration and holdout now partition the test split
    n = len(te.trajectories)
    assert rep2.final_points.shape[1] < n
    assert rep2.final_accuracy > 0.8


def test_single_basin_uses_fallback_only():
    # initial conditions drawn inside one basin only; no saddle is found and
    # every point gets the single stable label
    model = dynamics.competition_model()
    rng = np.random.default_rng(3)
    ics = rng.uniform([1.2, 0.0], [2.0, 0.4], size=(40, 2))
    data = dynamics.simulate(model, ics, 0.1, 150)
    tr, te = dynamics.split(data, 0.6, 1)
    cfg = pipeline.PipelineConfig(p=3, q=1.0, start_count=24)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = pipeline.run_pipeline(tr, te, cfg)
    assert not rep.saddles()
    assert rep.classifiers == []
    assert any("single-basin" in n for n in rep.notes)
    assert rep.final_accuracy == 1.0
    assert (rep.final_labels == rep.fallback).all()


def test_pipeline_error_carries_stage_and_partial_report():
    trajs = [np.array([[0.1, 0.2], [0.15, 0.25], [0.2, 0.3]])] * 3
    data = make_dataset(trajs)
    cfg = pipeline.PipelineConfig(p=5, q=1.0, start_count=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(pipeline.PipelineError) as err:
            pipeline.run_pipeline(data, data, cfg)
    assert err.value.stage in ("fixed_points", "stability", "labels")
    assert err.value.report is not None


def test_sweep_stage_records_table():
    model = dynamics.competition_model()
    rng = np.random.default_rng(5)
    data = dynamics.simulate(model, rng.uniform(0, 2, size=(60, 2)), 0.1, 120)
    tr, te = dynamics.split(data, 0.5, 2)
    cfg = pipeline.PipelineConfig(sweep_p=(3, 5), sweep_q=(1.0,))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = pipeline.run_pipeline(tr, te, cfg)
    assert {(r.p, r.q) for r in rep.sweep} == {(3, 1.0), (5, 1.0)}
    # the fitted model uses the sweep winner
    assert rep.model.spec.index_set.p == rep.sweep[0].p
    assert rep.empirical_error == pytest.approx(rep.sweep[0].e, rel=1e-9)
