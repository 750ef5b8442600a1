"""Benchmark ODEs, RK4 integration, dataset plumbing."""
from __future__ import annotations

import numpy as np
import pytest

from koopman_roa import dynamics

# Stationary states of the reactor at the default parameters, found by
# root-solving the right-hand side; residuals below reflect the 5-digit
# rounding of the coordinates.
MAK_EQUILIBRIA = {
    "A": [0.23642, 0.09002, 0.29608, 0.53324, 0.60782],
    "B": [0.23642, 0.67356, 0.29608, 0.07126, 0.48625],
    "C": [0.23642, 0.76358, 0.29608, 0.0, 0.4675],
    "D": [0.76358, 0.23642, 0.09167, 0.0, 0.14475],
    "E": [1.0, 0.0, 0.0, 0.0, 0.0],
}


def test_competition_rhs_values():
    # dx1 = 2 x1 - x1^2 - 3 x1 x2, dx2 = 2 x2 - x2^2 - 3 x1 x2
    np.testing.assert_allclose(dynamics.competition_rhs(np.array([1.0, 1.0])), [-2.0, -2.0])
    np.testing.assert_allclose(dynamics.competition_rhs(np.array([0.5, 1.0])),
                               [2 * 0.5 - 0.25 - 1.5, 2 - 1 - 1.5])


def test_competition_stationary_points():
    pts = np.array([[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [0.5, 0.5]])
    np.testing.assert_allclose(dynamics.competition_rhs(pts), 0.0, atol=1e-14)


def test_mak_stationary_points():
    for x in MAK_EQUILIBRIA.values():
        assert np.abs(dynamics.mak_rhs(np.array(x))).max() < 2e-5


def test_mak_washout_state_is_exactly_stationary():
    np.testing.assert_array_equal(dynamics.mak_rhs(np.array([1.0, 0, 0, 0, 0])), 0.0)


def test_mak_rhs_formula():
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 1, size=(20, 5))
    k1, k2, k3, k4 = dynamics.MAK_K
    d = dynamics.MAK_D
    x1, x2, x3, x4, x5 = X.T
    a = k1 * x1 * x3**2
    b = k2 * x2 * x4**2
    expected = np.stack([
        -a + d * (1.0 - x1),
        a - b - d * x2,
        a - (k3 + d) * x3,
        b - (k4 + d) * x4,
        k3 * x3 + k4 * x4 - d * x5,
    ], axis=-1)
    np.testing.assert_allclose(dynamics.mak_rhs(X), expected, atol=1e-14)


def test_rk4_matches_taylor_on_linear_system():
    # for dx = -x, one RK4 step multiplies by the quartic Taylor polynomial of exp(-dt)
    model = dynamics.OdeModel("lin", 1, (), lambda x: -x,
                              np.array([[-2.0, 2.0]]), np.array([[-1.0, 1.0]]))
    dt = 0.1
    factor = 1 - dt + dt**2 / 2 - dt**3 / 6 + dt**4 / 24
    x = np.array([[0.7]])
    np.testing.assert_allclose(dynamics.rk4_step(model, x, dt), factor * x, rtol=1e-15)
    with pytest.raises(ValueError):
        dynamics.rk4_step(model, x, 0.0)


def test_rk4_convergence_order():
    model = dynamics.OdeModel("lin", 1, (), lambda x: -x,
                              np.array([[-2.0, 2.0]]), np.array([[-1.0, 1.0]]))
    errs = []
    for dt in (0.2, 0.1):
        x = np.array([[1.0]])
        for _ in range(int(round(1.0 / dt))):
            x = dynamics.rk4_step(model, x, dt)
        errs.append(abs(float(x[0, 0]) - np.exp(-1.0)))
    assert errs[0] / errs[1] > 12.0  # fourth order: halving dt gains ~16x


def test_sample_initial_conditions():
    box = np.array([[0.0, 2.0], [1.0, 3.0]])
    a = dynamics.sample_initial_conditions(box, 50, 4)
    b = dynamics.sample_initial_conditions(box, 50, 4)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (50, 2)
    assert (a >= box[:, 0]).all() and (a <= box[:, 1]).all()
    with pytest.raises(ValueError):
        dynamics.sample_initial_conditions(box, 0, 1)
    with pytest.raises(ValueError):
        dynamics.sample_initial_conditions(np.array([[1.0, 0.0]]), 3, 1)


def test_competition_settles_to_nearest_attractor():
    model = dynamics.competition_model()
    data = dynamics.simulate(model, np.array([[1.8, 0.3], [0.3, 1.8]]), 0.1, 200)
    np.testing.assert_allclose(data.trajectories[0][-1], [2.0, 0.0], atol=1e-3)
    np.testing.assert_allclose(data.trajectories[1][-1], [0.0, 2.0], atol=1e-3)


def test_simulate_truncates_on_escape_without_storing_the_escapee():
    # dx = x^2 blows up in finite time; domain [0,1] puts the escape
    # threshold at 2, and the first state beyond it must not be stored
    model = dynamics.OdeModel("burst", 1, (), lambda x: x**2,
                              np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]))
    data = dynamics.simulate(model, np.array([[1.0], [0.1]]), 0.2, 40)
    assert data.ids == (0, 1)
    tr = data.trajectories[0]
    assert 0 in data.truncated and data.truncated[0] == len(tr)
    assert (tr <= 2.0).all() and len(tr) < 41
    # the slow trajectory stays inside and keeps every sample
    assert 1 not in data.truncated and len(data.trajectories[1]) == 41


def test_simulate_raises_when_nothing_survives():
    model = dynamics.OdeModel("burst", 1, (), lambda x: x**2,
                              np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]))
    with pytest.raises(dynamics.SimulationError):
        dynamics.simulate(model, np.array([[40.0]]), 0.5, 10)


def test_to_snapshots_alignment():
    model = dynamics.competition_model()
    data = dynamics.simulate(model, np.array([[1.0, 0.4], [0.4, 1.0]]), 0.1, 5)
    pairs = dynamics.to_snapshots(data)
    assert pairs.N == 10 and pairs.n == 2
    np.testing.assert_array_equal(pairs.X[:, 0], data.trajectories[0][0])
    np.testing.assert_array_equal(pairs.Y[:, 0], data.trajectories[0][1])
    np.testing.assert_array_equal(pairs.X[:, 5], data.trajectories[1][0])
    np.testing.assert_array_equal(pairs.Y[:, 9], data.trajectories[1][5])


def test_split_partitions_trajectories():
    model = dynamics.competition_model()
    ics = dynamics.sample_initial_conditions(model.ic_box, 10, 2)
    data = dynamics.simulate(model, ics, 0.1, 4)
    tr, te = dynamics.split(data, 0.7, 1)
    assert len(tr) == 7 and len(te) == 3
    assert set(tr.ids) | set(te.ids) == set(data.ids)
    assert set(tr.ids).isdisjoint(te.ids)
    tr2, _ = dynamics.split(data, 0.7, 1)
    assert tr2.ids == tr.ids
    with pytest.raises(ValueError):
        dynamics.split(data, 1.5, 1)


def test_endpoint_clusters():
    def make(end):
        return np.vstack([np.linspace(0, 1, 5)[:, None] * np.asarray(end)])

    ends = [(2.0, 0.0), (0.0, 2.0), (2.0, 0.01), (2.0, 0.0), (0.0, 1.99)]
    data = dynamics.TrajectoryDataset(
        dt=0.1, ids=tuple(range(5)), trajectories=[make(e) for e in ends])
    labels, reps = dynamics.endpoint_clusters(data, radius=0.1)
    assert labels[0] == labels[2] == labels[3] == 0  # largest cluster first
    assert labels[1] == labels[4] == 1
    np.testing.assert_allclose(reps[0], [2.0, 0.0])


def test_endpoint_clusters_marks_truncated():
    trs = [np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[0.0, 0.0], [1.0, 1.0]])]
    data = dynamics.TrajectoryDataset(dt=0.1, ids=(0, 1), trajectories=trs,
                                      truncated={1: 2})
    labels, _ = dynamics.endpoint_clusters(data)
    assert labels.tolist() == [0, -1]


def test_csv_roundtrip(tmp_path):
    model = dynamics.competition_model()
    ics = dynamics.sample_initial_conditions(model.ic_box, 3, 9)
    data = dynamics.simulate(model, ics, 0.1, 6)
    path = tmp_path / "t.csv"
    dynamics.save_trajectories_csv(data, path)
    back = dynamics.load_trajectories_csv(path)
    assert back.ids == data.ids
    assert back.dt == data.dt
    for a, b in zip(back.trajectories, data.trajectories):
        np.testing.assert_array_equal(a, b)
