"""Benchmark systems, trajectory simulation, and snapshot datasets."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

COMPETITION_R = (2.0, 1.0, 2.0, 1.0, 3.0, 3.0)
MAK_K = (7.0, 5.0, 0.3, 0.05)
# Dilution rate making the published reactor equilibria stationary; fit by
# least squares over the stationarity conditions of the tabulated points.
MAK_D = 0.19

# Trajectories are cut once they leave the recommended domain expanded by
# this factor of its half-width on each side, or become non-finite.
ESCAPE_EXPANSION = 2.0


class SimulationError(RuntimeError):
    """Raised when a simulation batch produces no usable trajectory at all."""


@dataclass(frozen=True)
class OdeModel:
    """Continuous-time system with a batch right-hand side.

    rhs maps arrays shaped (..., n) to arrays of the same shape. domain is
    the box where the dynamics are considered well behaved (transients
    included); ic_box is the default sampling region for initial conditions.
    """

    name: str
    n: int
    params: tuple[float, ...]
    rhs: Callable[[np.ndarray], np.ndarray]
    domain: np.ndarray
    ic_box: np.ndarray


@dataclass
class TrajectoryDataset:
    """Fixed-step sampled trajectories, one per initial condition."""

    dt: float
    ids: tuple[int, ...]
    trajectories: list[np.ndarray]
    seed: int | None = None
    truncated: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for tr in self.trajectories:
            if len(tr) < 2:
                raise ValueError("each trajectory needs at least 2 samples")

    @property
    def n(self) -> int:
        return self.trajectories[0].shape[1]

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass(frozen=True)
class SnapshotPairs:
    """Aligned state/successor columns; pairs never span trajectories."""

    X: np.ndarray
    Y: np.ndarray
    dt: float

    @property
    def N(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]


def competition_rhs(x, r: Sequence[float] = COMPETITION_R) -> np.ndarray:
    """Two-species competition with logistic self-limitation."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack(
        [
            r[0] * x1 - r[1] * x1**2 - r[4] * x1 * x2,
            r[2] * x2 - r[3] * x2**2 - r[5] * x1 * x2,
        ],
        axis=-1,
    )


def mak_rhs(x, k: Sequence[float] = MAK_K, d: float = MAK_D) -> np.ndarray:
    """Open mass-action reactor: substrate inflow, two autocatalytic species.

    Substrate x1 enters at dilution rate d; species x3 and x4 grow on x1 and
    x2 respectively and decay into the product pool x5.
    """
    x = np.asarray(x, dtype=float)
    x1, x2, x3, x4, x5 = (x[..., i] for i in range(5))
    a = k[0] * x1 * x3**2
    b = k[1] * x2 * x4**2
    return np.stack(
        [
            -a + d - d * x1,
            a - b - d * x2,
            a - k[2] * x3 - d * x3,
            b - k[3] * x4 - d * x4,
            k[2] * x3 + k[3] * x4 - d * x5,
        ],
        axis=-1,
    )


def competition_model(r: Sequence[float] = COMPETITION_R) -> OdeModel:
    box = np.array([[0.0, 2.0], [0.0, 2.0]])
    return OdeModel(
        name="competition",
        n=2,
        params=tuple(r),
        rhs=lambda x, r=tuple(r): competition_rhs(x, r),
        domain=box,
        ic_box=box.copy(),
    )


def mak_model(k: Sequence[float] = MAK_K, d: float = MAK_D) -> OdeModel:
    # Autocatalytic bursts can overshoot the unit cube before settling; the
    # escape expansion in simulate() gives them room, and runaway bursts are
    # truncated rather than kept as extreme outliers.
    box = np.array([[0.0, 1.0]] * 5)
    return OdeModel(
        name="mak",
        n=5,
        params=tuple(k) + (d,),
        rhs=lambda x, k=tuple(k), d=d: mak_rhs(x, k, d),
        domain=box,
        ic_box=box.copy(),
    )


BUILTIN_MODELS = {"competition": competition_model, "mak": mak_model}


def rk4_step(model: OdeModel, x, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    f = model.rhs
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def sample_initial_conditions(box, count: int, seed: int) -> np.ndarray:
    """Uniform i.i.d. states in the box; deterministic given the seed."""
    box = np.asarray(box, dtype=float)
    if count < 1:
        raise ValueError("count must be >= 1")
    if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 1] < box[:, 0]):
        raise ValueError("box must be rows of (low, high) with high >= low")
    rng = np.random.default_rng(seed)
    return rng.uniform(box[:, 0], box[:, 1], size=(count, box.shape[0]))


def simulate(
    model: OdeModel,
    initial_conditions,
    dt: float,
    steps: int,
    seed: int | None = None,
) -> TrajectoryDataset:
    """Integrate every initial condition for `steps` fixed RK4 steps.

    A trajectory is truncated (not discarded) as soon as its state leaves the
    escape box or stops being finite; the batch itself never aborts.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ics = np.atleast_2d(np.asarray(initial_conditions, dtype=float))
    m = ics.shape[0]
    lo, hi = model.domain[:, 0], model.domain[:, 1]
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    lo_esc = center - (1.0 + ESCAPE_EXPANSION) * half
    hi_esc = center + (1.0 + ESCAPE_EXPANSION) * half

    out = np.full((steps + 1, m, model.n), np.nan)
    out[0] = ics
    x = ics.copy()
    alive = np.ones(m, dtype=bool)
    for s in range(steps):
        xn = rk4_step(model, x, dt)
        finite = np.isfinite(xn).all(axis=1)
        # a state outside the escape box ends its trajectory and is not kept
        inside = finite & (xn >= lo_esc).all(axis=1) & (xn <= hi_esc).all(axis=1)
        alive &= inside
        out[s + 1][alive] = xn[alive]
        x = np.where(alive[:, None], xn, center)

    ids, trajectories, truncated = [], [], {}
    for i in range(m):
        good = ~np.isnan(out[:, i]).any(axis=1)
        length = steps + 1 if good.all() else int(np.argmin(good))
        if length < 2:
            truncated[i] = length  # blew up immediately; nothing usable kept
            continue
        ids.append(i)
        trajectories.append(out[:length, i].copy())
        if length < steps + 1:
            truncated[i] = length
    if not trajectories:
        raise SimulationError("every trajectory left the domain or became non-finite")
    return TrajectoryDataset(
        dt=dt, ids=tuple(ids), trajectories=trajectories, seed=seed, truncated=truncated
    )


def to_snapshots(dataset: TrajectoryDataset) -> SnapshotPairs:
    """Stack (state, successor) columns from all trajectories."""
    X = np.hstack([tr[:-1].T for tr in dataset.trajectories])
    Y = np.hstack([tr[1:].T for tr in dataset.trajectories])
    return SnapshotPairs(X=X, Y=Y, dt=dataset.dt)


def split(dataset: TrajectoryDataset, fraction: float, seed: int):
    """Partition at trajectory granularity into (train, test)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be strictly between 0 and 1")
    m = len(dataset)
    if m < 2:
        raise ValueError("need at least 2 trajectories to split")
    k = min(max(int(round(fraction * m)), 1), m - 1)
    perm = np.random.default_rng(seed).permutation(m)
    first, second = np.sort(perm[:k]), np.sort(perm[k:])

    def take(idx):
        return TrajectoryDataset(
            dt=dataset.dt,
            ids=tuple(dataset.ids[i] for i in idx),
            trajectories=[dataset.trajectories[i] for i in idx],
            seed=dataset.seed,
            truncated={dataset.ids[i]: dataset.truncated[dataset.ids[i]]
                       for i in idx if dataset.ids[i] in dataset.truncated},
        )

    return take(first), take(second)


def endpoint_clusters(dataset: TrajectoryDataset, radius: float = 0.1):
    """Group trajectories by where they end up.

    Greedy single-pass clustering of final states: a trajectory joins the
    first cluster whose representative endpoint lies within `radius`,
    otherwise starts a new cluster. Clusters are relabeled by descending
    size so label 0 is the most populated attractor. Truncated trajectories
    get label -1 (their endpoint is an escape artifact, not an attractor).

    Returns (labels array aligned with dataset order, representative points).
    """
    reps: list[np.ndarray] = []
    raw = np.full(len(dataset), -1, dtype=int)
    for i, tr in enumerate(dataset.trajectories):
        if dataset.ids[i] in dataset.truncated:
            continue
        e = tr[-1]
        for ci, r in enumerate(reps):
            if np.linalg.norm(e - r) <= radius:
                raw[i] = ci
                break
        else:
            reps.append(e.copy())
            raw[i] = len(reps) - 1
    if not reps:
        return raw, np.empty((0, dataset.n))
    order = np.argsort([-(raw == ci).sum() for ci in range(len(reps))], kind="stable")
    relabel = {int(old): new for new, old in enumerate(order)}
    labels = np.array([relabel[v] if v >= 0 else -1 for v in raw])
    return labels, np.array([reps[int(old)] for old in order])


def save_trajectories_csv(dataset: TrajectoryDataset, path) -> None:
    """Write `traj_id,t,x1..xn` rows ordered by (traj_id, t)."""
    n = dataset.n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "t"] + [f"x{j+1}" for j in range(n)])
        for tid, tr in zip(dataset.ids, dataset.trajectories):
            for k, state in enumerate(tr):
                w.writerow([tid, repr(k * dataset.dt)] + [repr(float(v)) for v in state])


def load_trajectories_csv(path) -> TrajectoryDataset:
    """Read a trajectory CSV written by save_trajectories_csv."""
    groups: dict[int, list[list[float]]] = {}
    times: dict[int, list[float]] = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header[:2] != ["traj_id", "t"]:
            raise ValueError(f"unrecognized trajectory CSV header: {header!r}")
        for row in rd:
            tid = int(row[0])
            groups.setdefault(tid, []).append([float(v) for v in row[2:]])
            times.setdefault(tid, []).append(float(row[1]))
    ids = tuple(sorted(groups))
    if not ids:
        raise ValueError("trajectory CSV contains no rows")
    first = times[ids[0]]
    dt = first[1] - first[0]
    return TrajectoryDataset(
        dt=dt, ids=ids, trajectories=[np.array(groups[i]) for i in ids]
    )
