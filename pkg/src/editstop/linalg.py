"""Dense linear-algebra and information-theoretic primitives.

Everything here is a pure function over immutable float64 inputs. Vectors
and matrices are plain numpy arrays; probability distributions carry their
support explicitly so that divergences between distributions over shifting
token sets are always computed on matched supports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimMismatchError,
    EmptyInputError,
    NonPositiveTemperatureError,
    RankTooLargeError,
    SupportMismatchError,
    ZeroNormError,
)

# Floor applied to probabilities before any log ratio; keeps KL finite on
# renormalized supports without visibly perturbing sums (supports here are
# small, so the added mass stays far below the 1e-9 sum tolerance).
PROB_FLOOR = 1e-12

# Norms below this are treated as exactly zero.
NORM_FLOOR = 1e-30


def _as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ProbVector:
    """A probability distribution over an explicit, ordered support.

    ``probs[i]`` is the probability of ``support[i]``. Entries are floored
    at ``PROB_FLOOR`` so log ratios stay finite; the sum must be within
    1e-9 of one.
    """

    probs: np.ndarray
    support: tuple[int, ...] = field(default=())

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise EmptyInputError("probs must be a nonempty 1-D array")
        support = tuple(int(s) for s in self.support) if self.support else tuple(range(probs.size))
        if len(support) != probs.size:
            raise SupportMismatchError(
                f"support length {len(support)} != probs length {probs.size}"
            )
        if not np.all(np.isfinite(probs)):
            raise EmptyInputError("probs contain non-finite entries")
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise EmptyInputError(f"probs sum to {total!r}, expected 1 within 1e-9")
        if probs.min() < -1e-12 or probs.max() > 1.0 + 1e-9:
            raise EmptyInputError("probs outside [0, 1]")
        probs = np.maximum(probs, PROB_FLOOR)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "support", support)

    def __len__(self) -> int:
        return self.probs.size

    def index_of(self, token: int) -> int:
        return self.support.index(token)

    def prob_of(self, token: int) -> float:
        return float(self.probs[self.index_of(token)])

    def argmax_token(self) -> int:
        """Support member with the largest probability; ties break to the
        lowest token index (supports are stored in increasing token order
        everywhere they are built, so np.argmax's first-hit rule matches)."""
        return self.support[int(np.argmax(self.probs))]

    def top2_margin(self) -> float:
        """Gap between the two largest probabilities; 1.0 on a singleton."""
        if self.probs.size == 1:
            return 1.0
        top2 = np.partition(self.probs, -2)[-2:]
        return float(top2[1] - top2[0])

    def restrict(self, subset: tuple[int, ...]) -> "ProbVector":
        """Restrict to ``subset`` of the support and renormalize."""
        idx = [self.support.index(s) for s in subset]
        sub = self.probs[idx]
        mass = float(sub.sum())
        if mass <= 0.0:
            raise ZeroNormError("restriction has zero mass")
        return ProbVector(sub / mass, tuple(subset))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    if a.size != b.size:
        raise DimMismatchError(f"length mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise ZeroNormError("cosine similarity undefined for (near-)zero vectors")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def softmax(scores, temperature: float = 1.0, support: tuple[int, ...] | None = None) -> ProbVector:
    """Temperature softmax with max-subtraction for stability."""
    scores = _as_vector(scores, "scores")
    if scores.size == 0:
        raise EmptyInputError("softmax of empty score vector")
    if not temperature > 0.0:
        raise NonPositiveTemperatureError(f"temperature must be positive, got {temperature}")
    z = scores / temperature
    z = z - z.max()
    ez = np.exp(z)
    probs = ez / ez.sum()
    return ProbVector(probs, support if support is not None else tuple(range(scores.size)))


def _check_same_support(p: ProbVector, q: ProbVector) -> None:
    if p.support != q.support:
        raise SupportMismatchError(f"supports differ: {p.support} vs {q.support}")


def kl_divergence(p: ProbVector, q: ProbVector) -> float:
    """KL(p || q) in nats over a shared support.

    Entries are floored at ``PROB_FLOOR`` before the log ratio and the
    result is clamped to be nonnegative (it can only go negative by
    rounding, never below -1e-12).
    """
    _check_same_support(p, q)
    pp = np.maximum(p.probs, PROB_FLOOR)
    qq = np.maximum(q.probs, PROB_FLOOR)
    val = float(np.sum(pp * (np.log(pp) - np.log(qq))))
    if val < -1e-12:
        raise ValueError(f"KL computed as {val}, below rounding tolerance")
    return max(val, 0.0)


def total_variation(p: ProbVector, q: ProbVector) -> float:
    """Total variation distance 0.5 * sum |p_i - q_i| over a shared support."""
    _check_same_support(p, q)
    return float(0.5 * np.abs(p.probs - q.probs).sum())


def truncated_svd(m, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k left singular vectors and singular values of a dense matrix.

    Computed via symmetric eigendecomposition of the smaller Gram matrix
    (the matrices here are tall-thin with tiny rank, so this is both exact
    enough and dependency-free). Returns ``(U, s)`` with ``U`` of shape
    (rows, k), orthonormal columns, and ``s`` the singular values in
    decreasing order. Zero singular directions are completed to an
    orthonormal set.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimMismatchError(f"matrix must be 2-D, got shape {m.shape}")
    rows, cols = m.shape
    if not 1 <= k <= min(rows, cols):
        raise RankTooLargeError(f"k={k} outside [1, {min(rows, cols)}]")

    if rows <= cols:
        gram = m @ m.T
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1][:k]
        s = np.sqrt(np.maximum(evals[order], 0.0))
        u = evecs[:, order]
    else:
        gram = m.T @ m
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1][:k]
        s = np.sqrt(np.maximum(evals[order], 0.0))
        u = np.zeros((rows, k))
        tol = max(s[0], 1.0) * 1e-14 if s.size else 0.0
        dead: list[int] = []
        for j in range(k):
            if s[j] > tol:
                u[:, j] = (m @ evecs[:, order[j]]) / s[j]
            else:
                dead.append(j)
        if dead:
            # Complete zero-singular directions orthonormally.
            live = u[:, [j for j in range(k) if j not in dead]]
            basis = _orthonormal_completion(live, rows, len(dead))
            for idx, j in enumerate(dead):
                u[:, j] = basis[:, idx]
    # One re-orthonormalization pass against accumulated rounding.
    u, _ = np.linalg.qr(u)
    # qr can flip signs; re-anchor each column's sign to its largest entry.
    for j in range(u.shape[1]):
        pivot = np.argmax(np.abs(u[:, j]))
        if u[pivot, j] < 0:
            u[:, j] = -u[:, j]
    return u, s


def _orthonormal_completion(existing: np.ndarray, dim: int, count: int) -> np.ndarray:
    """Deterministically extend ``existing`` orthonormal columns by ``count``."""
    cols = []
    have = existing
    for e in range(dim):
        if len(cols) == count:
            break
        cand = np.zeros(dim)
        cand[e] = 1.0
        if have.size:
            cand = cand - have @ (have.T @ cand)
        for c in cols:
            cand = cand - c * (c @ cand)
        norm = np.linalg.norm(cand)
        if norm > 1e-10:
            cols.append(cand / norm)
    if len(cols) < count:
        raise RankTooLargeError("cannot complete orthonormal basis")
    return np.column_stack(cols)
