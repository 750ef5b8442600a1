"""Operator fit, spectrum, flow maps, error metric, model files."""
from __future__ import annotations

import json

import numpy as np
import pytest

from koopman_roa import basis, dynamics, edmd


def affine_spec(n: int) -> basis.BasisSpec:
    return basis.BasisSpec("laguerre", basis.truncated_indices(n, 1, 1.0))


def make_linear_map_data(M, b, x0s, steps, dt=1.0):
    """Iterate y = Mx + b exactly; returns (SnapshotPairs, TrajectoryDataset)."""
    trajectories = []
    for x0 in x0s:
        tr = [np.asarray(x0, dtype=float)]
        for _ in range(steps):
            tr.append(M @ tr[-1] + b)
        trajectories.append(np.array(tr))
    data = dynamics.TrajectoryDataset(dt=dt, ids=tuple(range(len(x0s))),
                                      trajectories=trajectories)
    return dynamics.to_snapshots(data), data


def test_moment_matrices_match_direct_sums():
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 2, size=(2, 40))
    Y = rng.uniform(0, 2, size=(2, 40))
    pairs = dynamics.SnapshotPairs(X=X, Y=Y, dt=0.1)
    spec = basis.BasisSpec("laguerre", basis.truncated_indices(2, 2, 1.0))
    M = edmd.accumulate_moments(pairs, spec)
    G = sum(np.outer(basis.eval_basis(spec, X[:, i]), basis.eval_basis(spec, X[:, i]))
            for i in range(40)) / 40
    A = sum(np.outer(basis.eval_basis(spec, Y[:, i]), basis.eval_basis(spec, X[:, i]))
            for i in range(40)) / 40
    np.testing.assert_allclose(M.G, G, atol=1e-12)
    np.testing.assert_allclose(M.A, A, atol=1e-12)
    assert M.N == 40


def test_merge_moments_equals_single_pass():
    rng = np.random.default_rng(6)
    X = rng.uniform(0, 2, size=(2, 30))
    Y = rng.uniform(0, 2, size=(2, 30))
    spec = basis.BasisSpec("laguerre", basis.truncated_indices(2, 2, 1.0))
    full = edmd.accumulate_moments(dynamics.SnapshotPairs(X, Y, 0.1), spec)
    a = edmd.accumulate_moments(dynamics.SnapshotPairs(X[:, :12], Y[:, :12], 0.1), spec)
    b = edmd.accumulate_moments(dynamics.SnapshotPairs(X[:, 12:], Y[:, 12:], 0.1), spec)
    merged = edmd.merge_moments(a, b)
    np.testing.assert_allclose(merged.G, full.G, atol=1e-14)
    np.testing.assert_allclose(merged.A, full.A, atol=1e-14)


def test_scalar_halving_map_has_known_operator():
    # y = x/2 with dictionary (1, 1-x): the second dictionary element maps to
    # 1 - x/2 = 0.5*1 + 0.5*(1-x), so U = [[1, 0], [0.5, 0.5]] exactly
    X = np.array([[0.2, 1.0, 1.7]])
    pairs = dynamics.SnapshotPairs(X=X, Y=0.5 * X, dt=1.0)
    model = edmd.fit(pairs, affine_spec(1))
    np.testing.assert_allclose(model.U, [[1.0, 0.0], [0.5, 0.5]], atol=1e-10)
    np.testing.assert_allclose(np.sort_complex(model.mu), [0.5, 1.0], atol=1e-12)


def test_fit_recovers_affine_linear_map():
    R = np.array([[1.0, 0.3], [-0.2, 0.9]])
    M = R @ np.diag([0.8, 0.5]) @ np.linalg.inv(R)
    b = np.array([0.1, -0.05])
    rng = np.random.default_rng(7)
    pairs, data = make_linear_map_data(M, b, rng.uniform(0, 1, size=(12, 2)), steps=6)
    model = edmd.fit(pairs, affine_spec(2))
    assert sorted(np.abs(model.mu), reverse=True) == pytest.approx([1.0, 0.8, 0.5], abs=1e-10)
    x = np.array([0.3, 0.7])
    np.testing.assert_allclose(edmd.flow(model, x, 1), M @ x + b, atol=1e-10)
    np.testing.assert_allclose(edmd.flow(model, x, 3),
                               M @ (M @ (M @ x + b) + b) + b, atol=1e-9)
    assert edmd.empirical_error(model, data).e < 1e-10


def test_eigendecomposition_identities():
    rng = np.random.default_rng(8)
    model = dynamics.competition_model()
    data = dynamics.simulate(model, rng.uniform(0, 2, size=(30, 2)), 0.1, 60)
    km = edmd.fit(dynamics.to_snapshots(data),
                  basis.BasisSpec("laguerre", basis.truncated_indices(2, 3, 1.0)))
    np.testing.assert_allclose(km.U @ km.Xi, km.Xi * km.mu, atol=1e-9)
    np.testing.assert_allclose(km.W @ km.Xi, np.eye(km.d), atol=1e-9)
    X = rng.uniform(0, 2, size=(2, 15))
    np.testing.assert_allclose(km.Xi @ km.phi(X), km.psi(X), atol=1e-8)
    # eigenvalues sorted by magnitude, then real part, then imaginary part
    keys = [(-abs(m), -m.real, -m.imag) for m in km.mu]
    assert keys == sorted(keys)


def test_predict_observables_advances_dictionary():
    R = np.array([[1.0, 0.1], [0.0, 1.0]])
    M = R @ np.diag([0.9, 0.6]) @ np.linalg.inv(R)
    b = np.zeros(2)
    rng = np.random.default_rng(9)
    pairs, _ = make_linear_map_data(M, b, rng.uniform(0, 1, size=(10, 2)), steps=5)
    km = edmd.fit(pairs, affine_spec(2))
    x = np.array([0.4, 0.2])
    np.testing.assert_allclose(edmd.predict_observables(km, x, 1),
                               km.psi(M @ x), atol=1e-10)


def test_flow_backward_inverts_forward():
    M = np.diag([0.8, 0.5])
    pairs, _ = make_linear_map_data(M, np.array([0.2, 0.1]),
                                    np.random.default_rng(10).uniform(0, 1, (8, 2)), 5)
    km = edmd.fit(pairs, affine_spec(2))
    x = np.array([0.6, 0.3])
    np.testing.assert_allclose(edmd.flow(km, edmd.flow(km, x, 3), -3), x, atol=1e-8)


def test_flow_path_matches_stepwise_flow():
    M = np.diag([0.9, 0.7])
    pairs, _ = make_linear_map_data(M, np.zeros(2),
                                    np.random.default_rng(11).uniform(0, 1, (8, 2)), 5)
    km = edmd.fit(pairs, affine_spec(2))
    x = np.array([0.5, 0.8])
    path = edmd.flow_path(km, x, 4)
    for k in range(1, 5):
        np.testing.assert_allclose(path[k - 1], edmd.flow(km, x, k), atol=1e-10)


def test_empirical_error_measures_relative_deviation():
    M = np.diag([0.8, 0.5])
    b = np.array([0.3, 0.2])
    pairs, _ = make_linear_map_data(M, b, np.random.default_rng(12).uniform(0, 1, (8, 2)), 5)
    km = edmd.fit(pairs, affine_spec(2))
    # stored trajectory = exact iterates shifted by a constant offset
    delta = np.array([0.01, -0.02])
    x0 = np.array([0.5, 0.5])
    exact = [x0]
    for _ in range(4):
        exact.append(M @ exact[-1] + b)
    stored = np.array(exact)
    stored[1:] += delta
    data = dynamics.TrajectoryDataset(dt=1.0, ids=(0,), trajectories=[stored])
    rep = edmd.empirical_error(km, data)
    expected = np.mean([np.linalg.norm(delta) / np.linalg.norm(s) for s in stored[1:]])
    assert rep.e == pytest.approx(expected, rel=1e-6)
    assert rep.N_s == 1 and rep.horizons == (4,)


def test_empirical_error_skips_near_zero_truth():
    M = np.diag([0.8, 0.5])
    pairs, _ = make_linear_map_data(M, np.zeros(2),
                                    np.random.default_rng(13).uniform(0.5, 1, (8, 2)), 5)
    km = edmd.fit(pairs, affine_spec(2))
    tr = np.array([[0.5, 0.5], [0.0, 0.0], [0.2, 0.1]])
    rep = edmd.empirical_error(km, dynamics.TrajectoryDataset(dt=1.0, ids=(0,), trajectories=[tr]))
    assert rep.skipped_samples == 1


def test_pinv_path_matches_numpy_pseudoinverse():
    # duplicated dictionary directions make G singular, forcing the
    # truncated-eigenvalue path; it must agree with numpy's pinv solution
    rng = np.random.default_rng(14)
    X1 = rng.uniform(0, 2, size=(1, 25))
    X = np.vstack([X1, X1])  # second coordinate identical to the first
    Y = 0.5 * X
    spec = basis.BasisSpec("laguerre", basis.truncated_indices(2, 2, 1.0))
    pairs = dynamics.SnapshotPairs(X=X, Y=Y, dt=1.0)
    M = edmd.accumulate_moments(pairs, spec)
    with pytest.warns(UserWarning, match="rank"):
        model = edmd.fit(pairs, spec)
    U_oracle = M.A @ np.linalg.pinv(M.G, rcond=1e-10, hermitian=True)
    np.testing.assert_allclose(model.U, U_oracle, atol=1e-8)


def test_fit_warns_when_underdetermined():
    rng = np.random.default_rng(15)
    X = rng.uniform(0, 2, size=(2, 4))
    pairs = dynamics.SnapshotPairs(X=X, Y=0.9 * X, dt=1.0)
    spec = basis.BasisSpec("laguerre", basis.truncated_indices(2, 2, 1.0))
    with pytest.warns(UserWarning, match="underdetermined|rank"):
        edmd.fit(pairs, spec)


def test_pq_sweep_ranks_by_error():
    rng = np.random.default_rng(16)
    model = dynamics.competition_model()
    data = dynamics.simulate(model, rng.uniform(0, 2, size=(40, 2)), 0.1, 50)
    tr, te = dynamics.split(data, 0.7, 1)
    rows = edmd.pq_sweep(dynamics.to_snapshots(tr), te, [2, 3], [1.0, 2.0])
    assert len(rows) == 4
    assert [r.e for r in rows] == sorted(r.e for r in rows)
    assert {(r.p, r.q) for r in rows} == {(2, 1.0), (2, 2.0), (3, 1.0), (3, 2.0)}
    with pytest.raises(ValueError):
        edmd.pq_sweep(dynamics.to_snapshots(tr), te, [], [1.0])


def test_save_load_roundtrip(tmp_path):
    M = np.diag([0.8, 0.5])
    pairs, data = make_linear_map_data(M, np.array([0.1, 0.2]),
                                       np.random.default_rng(17).uniform(0, 1, (8, 2)), 5)
    km = edmd.fit(pairs, affine_spec(2))
    path = tmp_path / "m.kpm"
    edmd.save_model(km, path)
    back = edmd.load_model(path)
    np.testing.assert_array_equal(back.U, km.U)
    np.testing.assert_array_equal(back.mu, km.mu)
    np.testing.assert_array_equal(back.Xi, km.Xi)
    np.testing.assert_array_equal(back.W, km.W)
    assert back.spec == km.spec and back.dt == km.dt
    x = np.array([0.3, 0.4])
    np.testing.assert_array_equal(edmd.flow(back, x, 2), edmd.flow(km, x, 2))


def test_load_model_validates(tmp_path):
    M = np.diag([0.8, 0.5])
    pairs, _ = make_linear_map_data(M, np.zeros(2),
                                    np.random.default_rng(18).uniform(0, 1, (8, 2)), 5)
    km = edmd.fit(pairs, affine_spec(2))
    path = tmp_path / "m.kpm"
    edmd.save_model(km, path)
    doc = json.loads(path.read_text())
    for corrupt, msg in [
        ({**doc, "format": "other"}, "not a model file"),
        ({**doc, "version": 99}, "unsupported model version"),
        ({**doc, "U": doc["U"][:-1]}, "entries"),
    ]:
        bad = tmp_path / "bad.kpm"
        bad.write_text(json.dumps(corrupt))
        with pytest.raises(ValueError, match=msg):
            edmd.load_model(bad)
    # corrupting the spectrum must fail revalidation
    doc_bad = dict(doc)
    mu = list(doc["mu"])
    mu[0] += 0.5
    doc_bad["mu"] = mu
    bad = tmp_path / "bad2.kpm"
    bad.write_text(json.dumps(doc_bad))
    with pytest.raises(ValueError, match="spectrum"):
        edmd.load_model(bad)
