"""Truncated tensor-product orthogonal polynomial dictionaries.

The observable set used for the operator fit is a sparse grid of products
of univariate orthogonal polynomials, one factor per state coordinate.
Sparsity comes from a q-quasi-norm bound on the multi-indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

FAMILIES = ("laguerre", "hermite", "legendre")

# Tolerance on the quasi-norm comparison; integer indices raised to
# irrational powers sit arbitrarily close to the boundary otherwise.
_QNORM_RTOL = 1e-12


@dataclass(frozen=True)
class MultiIndexSet:
    """Canonically ordered multi-indices retained by the truncation."""

    n: int
    p: int
    q: float
    indices: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.array(self.indices, dtype=np.int64)


@dataclass(frozen=True)
class BasisSpec:
    """Dictionary description: family, retained indices, optional state scaling.

    domain_scale maps each coordinate affinely before polynomial evaluation:
    t_j = (x_j - shift_j) / scale_j. Identity by default.
    """

    family: str
    index_set: MultiIndexSet
    scale: tuple[float, ...] = field(default=())
    shift: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown polynomial family {self.family!r}")
        n = self.index_set.n
        object.__setattr__(self, "scale", tuple(self.scale) or (1.0,) * n)
        object.__setattr__(self, "shift", tuple(self.shift) or (0.0,) * n)
        if len(self.scale) != n or len(self.shift) != n:
            raise ValueError("domain_scale length must match state dimension")
        if any(s == 0 for s in self.scale):
            raise ValueError("domain_scale factors must be nonzero")

    @property
    def n(self) -> int:
        return self.index_set.n

    @property
    def d(self) -> int:
        return len(self.index_set)


def quasi_norm(alpha, q: float) -> float:
    """(sum alpha_i^q)^(1/q); the q<1 case is not a norm but orders indices."""
    s = sum(float(a) ** q for a in alpha)
    return s ** (1.0 / q)


def truncated_indices(n: int, p: int, q: float) -> MultiIndexSet:
    """All alpha in {0..p}^n with quasi_norm(alpha, q) <= p, graded lexicographic.

    The zero index and every unit index survive any valid truncation, which
    keeps the constant observable and one injective observable per coordinate.
    """
    if n < 1:
        raise ValueError("state dimension must be >= 1")
    if p < 1:
        raise ValueError("max degree must be >= 1; degree-1 terms recover the state")
    if q <= 0:
        raise ValueError("quasi-norm exponent must be positive")
    bound = p * (1.0 + _QNORM_RTOL)
    kept = [a for a in product(range(p + 1), repeat=n) if quasi_norm(a, q) <= bound]
    kept.sort(key=lambda a: (sum(a), tuple(-v for v in a)))
    return MultiIndexSet(n=n, p=p, q=float(q), indices=tuple(kept))


def _recurrence_table(family: str, p: int, t: np.ndarray) -> np.ndarray:
    """Degrees 0..p of the univariate family at t, stacked on axis 0."""
    T = np.empty((p + 1,) + t.shape, dtype=float)
    T[0] = 1.0
    if p == 0:
        return T
    if family == "laguerre":
        T[1] = 1.0 - t
        for k in range(1, p):
            T[k + 1] = ((2 * k + 1 - t) * T[k] - k * T[k - 1]) / (k + 1)
    elif family == "hermite":
        T[1] = t
        for k in range(1, p):
            T[k + 1] = t * T[k] - k * T[k - 1]
    elif family == "legendre":
        T[1] = t
        for k in range(1, p):
            T[k + 1] = ((2 * k + 1) * t * T[k] - k * T[k - 1]) / (k + 1)
    else:
        raise ValueError(f"unknown polynomial family {family!r}")
    return T


def eval_univariate(family: str, degree: int, t) -> float | np.ndarray:
    """Value of the degree-k member of the family via its three-term recurrence."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    arr = np.asarray(t, dtype=float)
    out = _recurrence_table(family, degree, arr)[degree]
    return out if arr.shape else float(out)


def eval_basis(spec: BasisSpec, x) -> np.ndarray:
    """Dictionary vector Psi(x) of length d for a single state x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise ValueError(f"state dimension {x.shape} does not match n={spec.n}")
    return eval_basis_batch(spec, x.reshape(-1, 1))[:, 0]


def eval_basis_batch(spec: BasisSpec, X: np.ndarray) -> np.ndarray:
    """Psi evaluated columnwise: X is n x N, result is d x N."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != spec.n:
        raise ValueError(f"expected an {spec.n} x N state block, got {X.shape}")
    scale = np.asarray(spec.scale)[:, None]
    shift = np.asarray(spec.shift)[:, None]
    T = _recurrence_table(spec.family, spec.index_set.p, (X - shift) / scale)
    A = spec.index_set.as_array()
    out = np.ones((len(A), X.shape[1]))
    for j in range(spec.n):
        out *= T[A[:, j], j, :]
    return out


def injective_positions(spec: BasisSpec) -> list[tuple[int, int]]:
    """(coordinate j, dictionary position l) for each unit index e_j.

    These observables are affine in a single coordinate and realize the
    selector used to read the state back out of a lifted prediction.
    """
    pos = []
    for j in range(spec.n):
        unit = tuple(1 if i == j else 0 for i in range(spec.n))
        pos.append((j, spec.index_set.indices.index(unit)))
    return pos


def _degree1_affine(family: str) -> tuple[float, float]:
    """Coefficients (a, b) with pi_1(t) = a + b t."""
    if family == "laguerre":
        return 1.0, -1.0
    return 0.0, 1.0


def invert_injective(spec: BasisSpec, v) -> np.ndarray:
    """Recover the state from the n injective observable values.

    Inverts the degree-1 polynomial coordinate-wise, then undoes domain_scale.
    """
    v = np.asarray(v, dtype=float)
    a, b = _degree1_affine(spec.family)
    t = (v - a) / b
    return t * np.asarray(spec.scale) + np.asarray(spec.shift)


def invert_injective_batch(spec: BasisSpec, V: np.ndarray) -> np.ndarray:
    """Batched invert_injective; V is n x N."""
    a, b = _degree1_affine(spec.family)
    t = (np.asarray(V, dtype=float) - a) / b
    return t * np.asarray(spec.scale)[:, None] + np.asarray(spec.shift)[:, None]
