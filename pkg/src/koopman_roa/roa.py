"""Region-of-attraction analysis on a fitted Koopman model.

Fixed points come from minimizing the one-step displacement of the fitted
flow map; stability from the local Jacobian of that map; basin boundaries
from level sets of (near-)unitary eigenfunctions through type-one saddles.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .edmd import KoopmanModel, flow

ASYMPTOTICALLY_STABLE = "AsymptoticallyStable"
UNSTABLE = "Unstable"
SADDLE = "Saddle"

DEFAULT_TOL_J = 1e-8
DEFAULT_MERGE = 1e-2
DEFAULT_EPS_HYP = 1e-3
DEFAULT_EPS_UNIT = 5e-3
TRIVIAL_REL_STD = 1e-6


class RoaError(RuntimeError):
    """Analysis produced no usable result (no fixed points, no classifier, ...)."""


@dataclass
class FixedPointReport:
    location: np.ndarray
    residual: float
    magnitudes: np.ndarray | None = None
    stability: str | None = None
    saddle_type: int | None = None
    margin: float | None = None
    non_hyperbolic: bool = False

    @property
    def class_label(self) -> str:
        if self.stability == SADDLE:
            return f"Saddle(type {self.saddle_type})"
        return self.stability or "unclassified"


def residual_objective(model: KoopmanModel, x, k: int = 1) -> float:
    """J(x) = half the squared distance between x and its k-step image."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=float)
    r = flow(model, x, k) - x
    return 0.5 * float(r @ r)


def _gauss_newton_polish(model, x, max_iter: int = 30):
    """Refine a minimum of J by Newton steps on the displacement residual."""
    best = x.copy()
    best_J = residual_objective(model, x)
    for _ in range(max_iter):
        r = flow(model, x, 1) - x
        H = local_jacobian(model, x)
        try:
            step, *_ = np.linalg.lstsq(H - np.eye(len(x)), -r, rcond=None)
        except np.linalg.LinAlgError:
            break
        x = x + step
        J = residual_objective(model, x)
        if not np.isfinite(J):
            break
        if J < best_J:
            best, best_J = x.copy(), J
        if np.linalg.norm(step) < 1e-12:
            break
    return best, best_J


def find_fixed_points(
    model: KoopmanModel,
    starts,
    tol_J: float = DEFAULT_TOL_J,
    delta_merge: float = DEFAULT_MERGE,
) -> list[FixedPointReport]:
    """Multi-start minimization of J: simplex descent plus Gauss-Newton polish.

    Minima with J < tol_J are kept; points within delta_merge are merged to
    their lowest-J representative; the result is sorted lexicographically by
    location. Stability fields are left for classify_stability to fill.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    if starts.size == 0:
        raise ValueError("need at least one start")
    n = starts.shape[1]

    def J(x):
        v = residual_objective(model, x)
        return v if np.isfinite(v) else 1e300

    accepted, best_rejected = [], np.inf
    for s in starts:
        res = minimize(
            J, s, method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 400 * n},
        )
        x, Jx = _gauss_newton_polish(model, res.x)
        if Jx < tol_J:
            accepted.append((Jx, x))
        else:
            best_rejected = min(best_rejected, Jx)
    if not accepted:
        warnings.warn(
            f"no fixed points accepted; best rejected J = {best_rejected:.3e}",
            stacklevel=2,
        )
        return []

    accepted.sort(key=lambda t: t[0])
    reps: list[tuple[float, np.ndarray]] = []
    for Jx, x in accepted:
        if not any(np.linalg.norm(x - r[1]) < delta_merge for r in reps):
            reps.append((Jx, x))
    reps.sort(key=lambda t: tuple(t[1]))
    return [FixedPointReport(location=x, residual=Jx) for Jx, x in reps]


def local_jacobian(model: KoopmanModel, x) -> np.ndarray:
    """Central-difference Jacobian H of the one-step flow map at x."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    h = np.finfo(float).eps ** (1.0 / 3.0) * np.maximum(1.0, np.abs(x))
    Xp = np.repeat(x[:, None], n, axis=1) + np.diag(h)
    Xm = np.repeat(x[:, None], n, axis=1) - np.diag(h)
    Fp = flow(model, Xp, 1)
    Fm = flow(model, Xm, 1)
    H = (Fp - Fm) / (2.0 * h[None, :])
    if not np.isfinite(H).all():
        raise RoaError(f"non-finite flow within the Jacobian stencil at {x}")
    return H


def classify_stability(H, eps_hyp: float = DEFAULT_EPS_HYP):
    """Stability class from eigenvalue magnitudes of the local linearization.

    Accepts either the n x n Jacobian or a precomputed magnitude vector.
    Returns (class, saddle_type, magnitudes, margin, non_hyperbolic); a
    magnitude within eps_hyp of 1 raises the NonHyperbolic flag rather than
    silently trusting the count.
    """
    if eps_hyp <= 0:
        raise ValueError("eps_hyp must be positive")
    H = np.asarray(H)
    mags = np.sort(np.abs(np.linalg.eigvals(H))) if H.ndim == 2 else np.sort(np.abs(H))
    n = len(mags)
    k = int((mags > 1.0).sum())
    if k == 0:
        cls, saddle_type = ASYMPTOTICALLY_STABLE, None
    elif k == n:
        cls, saddle_type = UNSTABLE, None
    else:
        cls, saddle_type = SADDLE, k
    margin = float(np.min(np.abs(mags - 1.0)))
    return cls, saddle_type, mags, margin, margin < eps_hyp


def fill_stability(model: KoopmanModel, reports, eps_hyp: float = DEFAULT_EPS_HYP):
    """Complete FixedPointReports in place with Jacobian-based stability."""
    for rep in reports:
        H = local_jacobian(model, rep.location)
        cls, stype, mags, margin, nh = classify_stability(H, eps_hyp)
        rep.stability, rep.saddle_type = cls, stype
        rep.magnitudes, rep.margin, rep.non_hyperbolic = mags, margin, nh
    return reports


def default_starts(model: KoopmanModel, X: np.ndarray, Y: np.ndarray, count: int = 64):
    """Optimizer starts: a spread-out data subsample plus the slowest samples.

    Slow samples (smallest one-step displacement) concentrate near fixed
    points of every kind, including saddles that attract almost no endpoints.
    """
    m = X.shape[1]
    take = min(count, m)
    # greedy farthest-point subsample for domain coverage
    picked = [0]
    dist = np.linalg.norm(X - X[:, [0]], axis=0)
    for _ in range(take - 1):
        nxt = int(np.argmax(dist))
        picked.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(X - X[:, [nxt]], axis=0))
    spread = X[:, picked].T
    disp = np.linalg.norm(Y - X, axis=0)
    slow = X[:, np.argsort(disp)[:take]].T
    return np.vstack([spread, slow])


@dataclass
class UnitaryCandidate:
    index: int
    mu: complex
    direct_usable: bool


def select_unitary_candidates(
    model: KoopmanModel,
    training_states: np.ndarray,
    eps_unit: float = DEFAULT_EPS_UNIT,
) -> list[UnitaryCandidate]:
    """Nontrivial eigenfunctions ranked by |mu - 1|.

    The trivial (constant) eigenfunction is detected by the relative standard
    deviation of Re phi over the training states and excluded. Candidates
    inside eps_unit of 1 are usable directly; the rest are material for the
    two-eigenfunction product construction.
    """
    Phi = (model.W @ model.psi(training_states)).real
    means = np.abs(Phi.mean(axis=1))
    stds = Phi.std(axis=1)
    out = []
    for i in range(model.d):
        if stds[i] <= TRIVIAL_REL_STD * max(means[i], np.finfo(float).tiny):
            continue
        mu = complex(model.mu[i])
        out.append(UnitaryCandidate(index=i, mu=mu, direct_usable=abs(mu - 1.0) < eps_unit))
    if not out:
        raise RoaError("model has only trivial unitary structure; nothing to rank")
    out.sort(key=lambda c: abs(c.mu - 1.0))
    return out


@dataclass
class UnitaryEigenfunction:
    """Eigenfunction with composed eigenvalue pinned to (approximately) one.

    kind "direct": a single fitted eigenfunction already inside eps_unit.
    kind "pair": phi_1 * phi_2^{k2} with k2 = -ln mu_1 / ln mu_2, so the
    composed eigenvalue is exactly one; the fractional power acts on |phi_2|
    and the sign of phi_2 travels separately as a branch marker.
    kind "combination": a fixed linear mixture of near-unit eigenfunctions
    (plus a constant), used when the unit eigenvalue is nearly degenerate
    and single eigenvectors mix the basin indicators arbitrarily.
    """

    model: KoopmanModel
    kind: str
    indices: tuple[int, ...]
    mu_bar: complex
    k1: float = 1.0
    k2: float | None = None
    weights: np.ndarray | None = None
    offset: float = 0.0

    def eval(self, x) -> complex:
        val, _ = self.eval_with_branch(np.asarray(x, dtype=float))
        return complex(val[0]) if np.ndim(x) == 1 else val

    def eval_with_branch(self, X: np.ndarray):
        """Values plus the sign branch of the fractional-power factor.

        The branch is +/-1 for kind "pair" and identically +1 otherwise.
        """
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        cols = X.reshape(self.model.n, 1) if single else X
        Phi = self.model.phi(cols)
        if self.kind == "direct":
            vals = Phi[self.indices[0]]
            branch = np.ones(cols.shape[1])
        elif self.kind == "pair":
            f1 = Phi[self.indices[0]].real
            f2 = Phi[self.indices[1]].real
            mag = np.abs(f2) ** self.k2
            vals = (f1**self.k1) * mag + 0j
            branch = np.where(f2 >= 0, 1.0, -1.0)
        elif self.kind == "combination":
            stack = Phi[list(self.indices)]
            vals = (self.weights @ stack) + self.offset
            branch = np.ones(cols.shape[1])
        else:
            raise ValueError(f"unknown unitary eigenfunction kind {self.kind!r}")
        return vals, branch


def construct_unitary(
    model: KoopmanModel,
    i1: int,
    i2: int | None = None,
    eps_unit: float = DEFAULT_EPS_UNIT,
) -> UnitaryEigenfunction:
    """Compose a unit-eigenvalue eigenfunction from one or two fitted ones.

    With i2 omitted the eigenfunction i1 is used directly (its eigenvalue
    must already lie within eps_unit of 1). Otherwise both eigenvalues must
    be real, positive, and away from 1, and the exponent k2 is chosen so the
    product has eigenvalue exactly one.
    """
    mu1 = complex(model.mu[i1])
    if i2 is None:
        if abs(mu1 - 1.0) >= eps_unit:
            raise RoaError(
                f"eigenvalue {mu1:.6g} is not within {eps_unit} of 1; "
                "a second eigenfunction is required"
            )
        return UnitaryEigenfunction(model=model, kind="direct", indices=(i1,), mu_bar=mu1)

    mu2 = complex(model.mu[i2])
    for mu in (mu1, mu2):
        if abs(mu.imag) > 1e-12 * max(1.0, abs(mu)) or mu.real <= 0:
            raise RoaError(f"pair construction needs real positive eigenvalues, got {mu:.6g}")
        if abs(mu - 1.0) <= 1e-12:
            raise RoaError("eigenvalue equal to one cannot anchor the product construction")
    l1, l2 = np.log(mu1.real), np.log(mu2.real)
    k2 = -l1 / l2
    mu_bar = complex(np.exp(l1 + k2 * l2))
    return UnitaryEigenfunction(
        model=model, kind="pair", indices=(i1, i2), mu_bar=mu_bar, k1=1.0, k2=float(k2)
    )


def combine_near_unit(
    model: KoopmanModel,
    stable_points: np.ndarray,
    eps_unit: float = DEFAULT_EPS_UNIT,
) -> list[UnitaryEigenfunction]:
    """Basin-indicator mixtures from the near-unit invariant subspace.

    With several basins the unit eigenvalue is (numerically) degenerate and
    the fitted eigenvectors span the indicator functions without aligning to
    them. Matching a mixture to 1 at one stable point and 0 at the others
    recovers one indicator per basin. Conjugate eigenfunction pairs are
    collapsed to a single representative since they carry the same real span.
    """
    sel = []
    for i in range(model.d):
        mu = model.mu[i]
        if abs(mu - 1.0) >= eps_unit:
            continue
        if mu.imag < 0 and any(abs(model.mu[j] - mu.conjugate()) < 1e-14 for j in sel):
            continue
        sel.append(i)
    if not sel:
        raise RoaError(f"no eigenvalues within {eps_unit} of 1; cannot build indicators")
    pts = np.atleast_2d(np.asarray(stable_points, dtype=float))
    Phi = model.phi(pts.T)[sel]
    cols = [Phi.real.T]
    imag_sel = [i for i in sel if abs(model.mu[i].imag) > 1e-12]
    if imag_sel:
        cols.append(model.phi(pts.T)[imag_sel].imag.T)
    cols.append(np.ones((pts.shape[0], 1)))
    V = np.hstack(cols)

    out = []
    worst = max(sel, key=lambda i: abs(model.mu[i] - 1.0))
    for s in range(pts.shape[0]):
        w, *_ = np.linalg.lstsq(V, np.eye(pts.shape[0])[s], rcond=None)
        nre = len(sel)
        weights = w[:nre].astype(complex)
        for pos, i in enumerate(imag_sel):
            weights[sel.index(i)] -= 1j * w[nre + pos]
        out.append(
            UnitaryEigenfunction(
                model=model,
                kind="combination",
                indices=tuple(sel),
                mu_bar=complex(model.mu[worst]),
                weights=weights,
                offset=float(w[-1]),
            )
        )
    return out


def eval_unitary(phi_plus: UnitaryEigenfunction, x) -> complex:
    """Value of the composed eigenfunction at one state."""
    return phi_plus.eval(x)


@dataclass
class SaddleClassifier:
    """Threshold test sigma * (Re phi_plus(x) - c) >= 0 against a saddle value.

    Points on the opposite sign branch of the fractional-power factor are
    decided by the sign comparison alone (the magnitude is not comparable
    across branches).
    """

    phi_plus: UnitaryEigenfunction
    saddle: np.ndarray
    c: float
    sigma: int
    target: int
    training_accuracy: float
    saddle_branch: float = 1.0

    def scores(self, X: np.ndarray) -> np.ndarray:
        vals, branch = self.phi_plus.eval_with_branch(X)
        s = self.sigma * (vals.real - self.c)
        cross = branch != self.saddle_branch
        if np.any(cross):
            s = np.where(cross, self.sigma * branch * self.saddle_branch, s)
        return s

    def decide(self, X: np.ndarray) -> np.ndarray:
        return self.scores(X) >= 0.0


def build_classifier(
    model: KoopmanModel,
    phi_plus: UnitaryEigenfunction,
    saddle: FixedPointReport,
    points: np.ndarray,
    labels: np.ndarray,
    target: int,
) -> SaddleClassifier:
    """Calibrate the orientation of a saddle-threshold classifier.

    The threshold is pinned to the eigenfunction value at the saddle; only
    the orientation sign is learned, by majority over the labeled training
    points. Accuracy at or below chance rejects the eigenfunction for this
    saddle.
    """
    if saddle.saddle_type not in (None, 1):
        warnings.warn(f"saddle is type {saddle.saddle_type}; threshold uses its level set anyway",
                      stacklevel=2)
    xs = np.asarray(saddle.location, dtype=float)
    val, branch = phi_plus.eval_with_branch(xs)
    c = float(val[0].real)
    base = SaddleClassifier(
        phi_plus=phi_plus, saddle=xs, c=c, sigma=1, target=int(target),
        training_accuracy=0.0, saddle_branch=float(branch[0]),
    )
    X = np.atleast_2d(np.asarray(points, dtype=float)).T if np.asarray(points).ndim == 1 else np.asarray(points, dtype=float)
    want = np.asarray(labels) == target
    best_sigma, best_acc = 1, -1.0
    for sigma in (1, -1):
        base.sigma = sigma
        acc = float((base.decide(X) == want).mean())
        if acc > best_acc:
            best_sigma, best_acc = sigma, acc
    if best_acc <= 0.5:
        raise RoaError(
            f"classifier accuracy {best_acc:.3f} is at or below chance; "
            "eigenfunction is uninformative for this saddle"
        )
    base.sigma, base.training_accuracy = best_sigma, best_acc
    return base


def classify_points(classifiers, points: np.ndarray, fallback: int):
    """First-match decision list; unmatched points get the fallback label.

    Returns (labels, scores); the score is the deciding classifier's margin,
    or the best rejecting margin for fallback points.
    """
    if not classifiers:
        raise ValueError("need at least one classifier")
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    m = X.shape[1]
    labels = np.full(m, int(fallback))
    scores = np.full(m, -np.inf)
    undecided = np.ones(m, dtype=bool)
    for clf in classifiers:
        s = clf.scores(X)
        hit = undecided & (s >= 0.0)
        labels[hit] = clf.target
        scores[hit] = s[hit]
        scores[undecided & ~hit] = np.maximum(scores[undecided & ~hit], s[undecided & ~hit])
        undecided &= ~hit
    return labels, scores


@dataclass
class BoundaryGrid:
    axes: tuple[int, int]
    a_values: np.ndarray
    b_values: np.ndarray
    re_phi: np.ndarray
    level: float
    contour: np.ndarray  # (k, 2) interpolated points on the level set
    note: str = ""


_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0))  # cell corners in ccw order


def boundary_grid(
    model: KoopmanModel,
    phi_plus: UnitaryEigenfunction,
    c: float,
    box,
    resolution: int = 200,
    axes: tuple[int, int] = (0, 1),
    frozen: np.ndarray | None = None,
) -> BoundaryGrid:
    """Re phi_plus on a 2-D grid plus the marching-squares contour at level c.

    For models with n > 2 the remaining coordinates are frozen at the given
    values and the grid spans the two chosen axes.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2 per axis")
    box = np.asarray(box, dtype=float)
    ia, ib = axes
    av = np.linspace(box[0, 0], box[0, 1], resolution)
    bv = np.linspace(box[1, 0], box[1, 1], resolution)
    A, B = np.meshgrid(av, bv, indexing="ij")
    if model.n == 2 and frozen is None:
        base = np.zeros(model.n)
    else:
        if frozen is None or len(np.asarray(frozen)) != model.n:
            raise ValueError("frozen coordinate values required when n > 2")
        base = np.asarray(frozen, dtype=float)
    X = np.repeat(base[:, None], A.size, axis=1)
    X[ia], X[ib] = A.ravel(), B.ravel()
    vals, _ = phi_plus.eval_with_branch(X)
    F = vals.real.reshape(resolution, resolution)

    segments = []
    Fc = F - c
    if Fc.min() > 0 or Fc.max() < 0:
        return BoundaryGrid(
            axes=axes, a_values=av, b_values=bv, re_phi=F, level=c,
            contour=np.empty((0, 2)),
            note=f"level {c:.6g} outside grid range [{F.min():.6g}, {F.max():.6g}]",
        )

    def interp(p1, v1, p2, v2):
        t = v1 / (v1 - v2)
        return p1 + t * (p2 - p1)

    for i in range(resolution - 1):
        for j in range(resolution - 1):
            corners = np.array(
                [[av[i], bv[j]], [av[i + 1], bv[j]],
                 [av[i + 1], bv[j + 1]], [av[i], bv[j + 1]]]
            )
            vals4 = np.array([Fc[i, j], Fc[i + 1, j], Fc[i + 1, j + 1], Fc[i, j + 1]])
            crossings = []
            for e1, e2 in _EDGES:
                v1, v2 = vals4[e1], vals4[e2]
                if (v1 < 0) != (v2 < 0):
                    crossings.append(interp(corners[e1], v1, corners[e2], v2))
            for k in range(0, len(crossings) - 1, 2):
                segments.append((crossings[k], crossings[k + 1]))
    if segments:
        contour = np.unique(np.round(np.array(segments).reshape(-1, 2), 12), axis=0)
    else:
        contour = np.empty((0, 2))
    note = "" if len(contour) else "no sign change on the grid"
    return BoundaryGrid(
        axes=axes, a_values=av, b_values=bv, re_phi=F, level=c, contour=contour, note=note
    )
