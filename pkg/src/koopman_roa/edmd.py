"""Least-squares Koopman approximation: fit, spectrum, flow maps, model files."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .basis import (
    BasisSpec,
    MultiIndexSet,
    eval_basis_batch,
    injective_positions,
    invert_injective_batch,
    truncated_indices,
)
from .dynamics import SnapshotPairs, TrajectoryDataset

MODEL_FORMAT = "koopman-roa/model"
MODEL_VERSION = 1

# Switch from a Cholesky solve to the truncated-eigenvalue pseudoinverse
# once the moment matrix is this badly conditioned.
CHOLESKY_COND_LIMIT = 1e8
DEFAULT_RTOL = 1e-10

_SPECTRAL_TOL = 1e-8
_IMAG_RESIDUE_TOL = 1e-6


class FitError(RuntimeError):
    """Numerical failure while fitting or evaluating a Koopman model."""


@dataclass(frozen=True)
class MomentMatrices:
    """Averaged outer products of dictionary evaluations."""

    G: np.ndarray
    A: np.ndarray
    N: int


@dataclass
class KoopmanModel:
    """Finite Koopman approximation with its spectral decomposition.

    Xi holds right eigenvectors as columns (these are also the modes that
    reconstruct observables from eigenfunctions); W = Xi^-1 holds left
    eigenvectors as rows. Eigenfunction evaluation is Phi(x) = W Psi(x).
    """

    spec: BasisSpec
    U: np.ndarray
    mu: np.ndarray
    Xi: np.ndarray
    W: np.ndarray
    dt: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.injective = injective_positions(self.spec)
        rows = [l for _, l in self.injective]
        self._BXi = self.Xi[rows, :]

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def n(self) -> int:
        return self.spec.n

    def psi(self, X: np.ndarray) -> np.ndarray:
        """Dictionary values; accepts a single state or an n x N block."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        out = eval_basis_batch(self.spec, X.reshape(self.n, 1) if single else X)
        return out[:, 0] if single else out

    def phi(self, X: np.ndarray) -> np.ndarray:
        """Eigenfunction values, one row per eigenfunction, columns follow X."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        cols = X.reshape(self.n, 1) if single else X
        out = self.W @ eval_basis_batch(self.spec, cols)
        return out[:, 0] if single else out


@dataclass(frozen=True)
class ErrorReport:
    """Mean relative multi-step prediction error over a test set."""

    e: float
    N_s: int
    horizons: tuple[int, ...]
    per_trajectory: tuple[float, ...]
    skipped_samples: int = 0


@dataclass(frozen=True)
class SweepRow:
    p: int
    q: float
    d: int
    e: float
    note: str = ""


def accumulate_moments(pairs: SnapshotPairs, spec: BasisSpec) -> MomentMatrices:
    """G = mean Psi(x)Psi(x)^T and A = mean Psi(y)Psi(x)^T over the pairs."""
    if pairs.N < 1:
        raise ValueError("need at least one snapshot pair")
    PX = eval_basis_batch(spec, pairs.X)
    PY = eval_basis_batch(spec, pairs.Y)
    for name, P in (("x", PX), ("y", PY)):
        good = np.isfinite(P).all(axis=0)
        if not good.all():
            raise FitError(
                f"non-finite dictionary evaluation on the {name} side of pair "
                f"{int(np.argmin(good))}"
            )
    G = PX @ PX.T / pairs.N
    A = PY @ PX.T / pairs.N
    return MomentMatrices(G=G, A=A, N=pairs.N)


def merge_moments(a: MomentMatrices, b: MomentMatrices) -> MomentMatrices:
    """Associative combination of moment blocks from disjoint pair chunks."""
    N = a.N + b.N
    wa, wb = a.N / N, b.N / N
    return MomentMatrices(G=wa * a.G + wb * b.G, A=wa * a.A + wb * b.A, N=N)


def _solve_operator(M: MomentMatrices, rtol: float):
    """U = A G^+ via Cholesky when well conditioned, else spectral cutoff."""
    w, V = np.linalg.eigh(M.G)
    cond = w[-1] / max(w[0], np.finfo(float).tiny)
    if w[0] > 0 and cond < CHOLESKY_COND_LIMIT:
        U = sla.cho_solve(sla.cho_factor(M.G), M.A.T).T
        rank = len(w)
    else:
        keep = w > rtol * w[-1]
        rank = int(keep.sum())
        Ginv = (V[:, keep] / w[keep]) @ V[:, keep].T
        U = M.A @ Ginv
    return U, float(cond), rank


def _normalize_columns(mu: np.ndarray, Xi: np.ndarray):
    """Unit-norm columns with the largest-magnitude entry made real positive."""
    order = np.lexsort((-mu.imag, -mu.real, -np.abs(mu)))
    mu, Xi = mu[order], Xi[:, order]
    norms = np.linalg.norm(Xi, axis=0)
    Xi = Xi / norms
    lead = np.argmax(np.abs(Xi), axis=0)
    phases = Xi[lead, np.arange(Xi.shape[1])]
    Xi = Xi * (np.abs(phases) / phases)
    return mu, Xi


def fit(pairs: SnapshotPairs, spec: BasisSpec, rtol: float = DEFAULT_RTOL) -> KoopmanModel:
    """Least-squares Koopman operator from snapshot pairs, with spectrum."""
    M = accumulate_moments(pairs, spec)
    return fit_from_moments(M, spec, dt=pairs.dt, rtol=rtol)


def fit_from_moments(
    M: MomentMatrices, spec: BasisSpec, dt: float, rtol: float = DEFAULT_RTOL
) -> KoopmanModel:
    d = spec.d
    if M.N < d:
        warnings.warn(
            f"only {M.N} pairs for a dictionary of size {d}; the fit is underdetermined",
            stacklevel=2,
        )
    U, cond, rank = _solve_operator(M, rtol)
    if rank < d:
        warnings.warn(
            f"moment matrix rank {rank} < dictionary size {d}; "
            "consider a stronger truncation (smaller p or q)",
            stacklevel=2,
        )
    mu, Xi = np.linalg.eig(U)
    mu, Xi = _normalize_columns(mu, Xi)
    try:
        W = np.linalg.inv(Xi)
    except np.linalg.LinAlgError as exc:
        raise FitError("eigenvector matrix is singular; spectrum is defective") from exc

    scale = max(np.linalg.norm(U), np.finfo(float).tiny)
    spectral = np.linalg.norm(U @ Xi - Xi * mu) / scale
    left = np.linalg.norm(W @ U - mu[:, None] * W) / scale
    if spectral > _SPECTRAL_TOL or left > _SPECTRAL_TOL:
        raise FitError(
            f"eigendecomposition residual {max(spectral, left):.2e} exceeds {_SPECTRAL_TOL:.0e}"
        )

    return KoopmanModel(
        spec=spec,
        U=U,
        mu=mu,
        Xi=Xi,
        W=W,
        dt=dt,
        diagnostics={
            "cond_G": cond,
            "rank_G": rank,
            "pairs": M.N,
            "spectral_residual": float(max(spectral, left)),
        },
    )


def fit_with_residual(pairs: SnapshotPairs, spec: BasisSpec, rtol: float = DEFAULT_RTOL):
    """fit() plus the root-mean-square one-step defect in dictionary space."""
    model = fit(pairs, spec, rtol=rtol)
    PX = eval_basis_batch(spec, pairs.X)
    PY = eval_basis_batch(spec, pairs.Y)
    defect = model.U @ PX - PY
    rms = float(np.sqrt(np.mean(defect**2)))
    model.diagnostics["fit_rms"] = rms
    return model, rms


def eval_eigenfunctions(model: KoopmanModel, x) -> np.ndarray:
    """Phi(x) = Xi^-1 Psi(x), the eigenfunction values at one state."""
    return model.phi(np.asarray(x, dtype=float))


def _check_real(Z: np.ndarray, what: str) -> np.ndarray:
    scale = max(float(np.linalg.norm(Z)), np.finfo(float).tiny)
    residue = float(np.linalg.norm(Z.imag)) / scale
    if residue > _IMAG_RESIDUE_TOL:
        raise FitError(
            f"imaginary residue {residue:.2e} in {what}; conjugate pairs failed to cancel"
        )
    return Z.real


def _powers(model: KoopmanModel, k: int) -> np.ndarray:
    if k < 0 and np.any(np.abs(model.mu) < 1e-12):
        raise FitError("backward evolution is singular: an eigenvalue is numerically zero")
    return model.mu**k


def predict_observables(model: KoopmanModel, x, k: int) -> np.ndarray:
    """Psi after k steps: Xi diag(mu)^k Phi(x). Negative k runs backward."""
    z = model.Xi @ (_powers(model, k) * model.phi(np.asarray(x, dtype=float)))
    return _check_real(z, "predicted observables")


def flow(model: KoopmanModel, x0, k: int) -> np.ndarray:
    """State after k steps of the fitted flow map (k < 0 gives backward flow)."""
    X = np.asarray(x0, dtype=float)
    single = X.ndim == 1
    cols = X.reshape(model.n, 1) if single else X
    V = model._BXi @ (_powers(model, k)[:, None] * model.phi(cols))
    states = invert_injective_batch(model.spec, _check_real(V, "flow prediction"))
    return states[:, 0] if single else states


def flow_path(model: KoopmanModel, x0, horizon: int) -> np.ndarray:
    """States at steps 1..horizon from x0, evaluated spectrally in one pass."""
    phi0 = model.phi(np.asarray(x0, dtype=float))
    ks = np.arange(1, horizon + 1)
    V = model._BXi @ (model.mu[:, None] ** ks * phi0[:, None])
    return invert_injective_batch(model.spec, _check_real(V, "flow prediction")).T


def empirical_error(model: KoopmanModel, test: TrajectoryDataset) -> ErrorReport:
    """Mean relative deviation between stored trajectories and the flow map.

    Samples whose true state norm falls below 1e-9 are skipped and counted.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    total, count, skipped = 0.0, 0, 0
    per_traj, horizons = [], []
    for tr in test.trajectories:
        K = len(tr) - 1
        pred = flow_path(model, tr[0], K)
        truth = tr[1:]
        norms = np.linalg.norm(truth, axis=1)
        ok = norms >= 1e-9
        skipped += int((~ok).sum())
        rel = np.linalg.norm(truth[ok] - pred[ok], axis=1) / norms[ok]
        total += float(rel.sum())
        count += int(ok.sum())
        horizons.append(K)
        per_traj.append(float(rel.mean()) if ok.any() else 0.0)
    e = total / count if count else 0.0
    return ErrorReport(
        e=e,
        N_s=len(test),
        horizons=tuple(horizons),
        per_trajectory=tuple(per_traj),
        skipped_samples=skipped,
    )


def pq_sweep(
    train: SnapshotPairs,
    test: TrajectoryDataset,
    p_candidates,
    q_candidates,
    family: str = "laguerre",
    rtol: float = DEFAULT_RTOL,
) -> list[SweepRow]:
    """Fit one model per (p, q) and rank them by empirical error, ascending.

    Candidates that fail numerically are kept in the table with e = +inf.
    """
    ps, qs = list(p_candidates), list(q_candidates)
    if not ps or not qs:
        raise ValueError("sweep candidate lists must be nonempty")
    n = train.n
    rows = []
    for p in ps:
        for q in qs:
            idx = truncated_indices(n, p, q)
            spec = BasisSpec(family=family, index_set=idx)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    model = fit(train, spec, rtol=rtol)
                e = empirical_error(model, test).e
                rows.append(SweepRow(p=p, q=float(q), d=spec.d, e=e))
            except (FitError, np.linalg.LinAlgError) as exc:
                rows.append(SweepRow(p=p, q=float(q), d=spec.d, e=float("inf"), note=str(exc)))
    if all(np.isinf(r.e) for r in rows):
        raise FitError("every sweep candidate failed to fit")
    rows.sort(key=lambda r: (r.e, r.d, r.p, r.q))
    return rows


def _complex_to_list(Z: np.ndarray) -> list[float]:
    flat = np.asarray(Z, dtype=complex).reshape(-1)
    out = np.empty(2 * flat.size)
    out[0::2], out[1::2] = flat.real, flat.imag
    return out.tolist()


def _complex_from_list(vals, shape) -> np.ndarray:
    arr = np.asarray(vals, dtype=float)
    return (arr[0::2] + 1j * arr[1::2]).reshape(shape)


def save_model(model: KoopmanModel, path) -> None:
    """Write the model as canonical versioned JSON (shortest round-trip floats)."""
    d = model.d
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "basis": {
            "family": model.spec.family,
            "n": model.spec.n,
            "p": model.spec.index_set.p,
            "q": model.spec.index_set.q,
            "indices": [list(a) for a in model.spec.index_set.indices],
            "scale": list(model.spec.scale),
            "shift": list(model.spec.shift),
        },
        "dt": model.dt,
        "U": np.asarray(model.U).reshape(-1).tolist(),
        "mu": _complex_to_list(model.mu),
        "Xi": _complex_to_list(model.Xi),
        "W": _complex_to_list(model.W),
        "injective": [[j, l] for j, l in model.injective],
        "diagnostics": {k: model.diagnostics[k] for k in sorted(model.diagnostics)},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path) -> KoopmanModel:
    """Read a model file, re-validating format, shapes, and the spectrum."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a model file: format={doc.get('format')!r}")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    b = doc["basis"]
    idx = MultiIndexSet(
        n=int(b["n"]), p=int(b["p"]), q=float(b["q"]),
        indices=tuple(tuple(int(v) for v in a) for a in b["indices"]),
    )
    spec = BasisSpec(family=b["family"], index_set=idx,
                     scale=tuple(b["scale"]), shift=tuple(b["shift"]))
    d = spec.d
    U = np.asarray(doc["U"], dtype=float)
    if U.size != d * d:
        raise ValueError(f"operator block has {U.size} entries, expected {d * d}")
    U = U.reshape(d, d)
    mu = _complex_from_list(doc["mu"], (d,))
    Xi = _complex_from_list(doc["Xi"], (d, d))
    W = _complex_from_list(doc["W"], (d, d))
    model = KoopmanModel(spec=spec, U=U, mu=mu, Xi=Xi, W=W, dt=float(doc["dt"]),
                         diagnostics=dict(doc.get("diagnostics", {})))
    if [[j, l] for j, l in model.injective] != doc["injective"]:
        raise ValueError("injective positions disagree with the stored basis")
    scale = max(np.linalg.norm(U), np.finfo(float).tiny)
    if np.linalg.norm(U @ Xi - Xi * mu) / scale > _SPECTRAL_TOL:
        raise ValueError("stored spectrum fails validation against the operator")
    return model
