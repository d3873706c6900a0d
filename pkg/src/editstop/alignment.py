"""Scoring of per-step activations against the persisted training map.

At each denoising step the model exposes one activation vector per
visible token. Those vectors are scored against either the row-energy
vector or the low-rank basis recovered from training, and the scores are
pushed through a fixed-temperature softmax over exactly the visible
token positions. Downstream stability tracking consumes only these
distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .capture import EvolutionVector, SubspaceBasis
from .errors import (
    DimMismatchError,
    EmptyVisibleSetError,
    ZeroNormError,
)
from .linalg import NORM_FLOOR, ProbVector, cosine_similarity, softmax

DEFAULT_BLOCK_TEMPERATURE = 1.0
DEFAULT_SUBSPACE_K = 3


class SimilarityVariant(Enum):
    VECTOR_COSINE = "vector_cosine"
    SUBSPACE_NORM = "subspace_norm"
    SUBSPACE_COSINE = "subspace_cosine"


@dataclass(frozen=True)
class SimilarityMode:
    variant: SimilarityVariant = SimilarityVariant.VECTOR_COSINE
    basis_k: int | None = None

    def __post_init__(self):
        subspace = self.variant is not SimilarityVariant.VECTOR_COSINE
        if subspace and self.basis_k is None:
            object.__setattr__(self, "basis_k", DEFAULT_SUBSPACE_K)
        if not subspace and self.basis_k is not None:
            raise ValueError("basis_k only applies to subspace variants")

    @property
    def minimum_score(self) -> float:
        """Score assigned to a degenerate (zero-norm) activation."""
        if self.variant is SimilarityVariant.VECTOR_COSINE:
            return -1.0
        return 0.0


@dataclass(frozen=True)
class VisibleSet:
    """Sorted token positions currently unmasked within a block."""

    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(int(m) for m in self.members)
        if any(m < 0 for m in members):
            raise ValueError(f"negative token index in {members}")
        if any(b <= a for a, b in zip(members, members[1:])):
            raise ValueError(f"members must be strictly increasing, got {members}")
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, item: int) -> bool:
        return item in self.members

    def is_superset_of(self, other: "VisibleSet") -> bool:
        return set(self.members) >= set(other.members)

    def intersect(self, other: "VisibleSet") -> "VisibleSet":
        return VisibleSet(tuple(sorted(set(self.members) & set(other.members))))


@dataclass(frozen=True)
class ActivationFrame:
    """Post-adapter activation vectors for the visible tokens at one step."""

    step: int
    activations: dict[int, np.ndarray]
    visible: VisibleSet

    def __post_init__(self):
        if set(self.activations.keys()) != set(self.visible.members):
            raise ValueError(
                f"activation keys {sorted(self.activations)} != visible {self.visible.members}"
            )
        cleaned = {}
        for s, vec in self.activations.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1:
                raise DimMismatchError(f"activation for token {s} must be 1-D")
            arr = arr.copy()
            arr.setflags(write=False)
            cleaned[int(s)] = arr
        object.__setattr__(self, "activations", cleaned)

    @property
    def d_out(self) -> int:
        first = next(iter(self.activations.values()))
        return first.size

    def degenerate_tokens(self) -> tuple[int, ...]:
        """Tokens whose activation is numerically zero."""
        return tuple(
            s
            for s in self.visible.members
            if float(np.linalg.norm(self.activations[s])) < NORM_FLOOR
        )


@dataclass(frozen=True)
class AlignmentDistribution:
    dist: ProbVector
    step: int
    temperature_used: float
    scores: dict[int, float] = field(compare=False)

    def __post_init__(self):
        if tuple(sorted(self.scores)) != self.dist.support:
            raise ValueError("score keys must match the distribution support")


def score_alignment(
    frame: ActivationFrame,
    reasoning_map: EvolutionVector | SubspaceBasis,
    mode: SimilarityMode = SimilarityMode(),
) -> dict[int, float]:
    """Similarity of each visible token's activation to the training map.

    Zero-norm activations never abort scoring; they are pinned to the
    mode's minimum score so they cannot win the alignment softmax.
    """
    if len(frame.visible) == 0:
        raise EmptyVisibleSetError("cannot score a frame with no visible tokens")
    want_vector = mode.variant is SimilarityVariant.VECTOR_COSINE
    if want_vector and not isinstance(reasoning_map, EvolutionVector):
        raise DimMismatchError("vector_cosine requires an EvolutionVector map")
    if not want_vector and not isinstance(reasoning_map, SubspaceBasis):
        raise DimMismatchError(f"{mode.variant.value} requires a SubspaceBasis map")
    if frame.d_out != reasoning_map.d_out:
        raise DimMismatchError(
            f"activation length {frame.d_out} != map dimension {reasoning_map.d_out}"
        )

    scores: dict[int, float] = {}
    for s in frame.visible.members:
        f = frame.activations[s]
        try:
            if mode.variant is SimilarityVariant.VECTOR_COSINE:
                scores[s] = cosine_similarity(f, reasoning_map.u)
            elif mode.variant is SimilarityVariant.SUBSPACE_NORM:
                scores[s] = float(np.linalg.norm(reasoning_map.project(f)))
            else:
                norm = float(np.linalg.norm(f))
                if norm < NORM_FLOOR:
                    raise ZeroNormError("zero activation")
                coords = reasoning_map.project(f)
                scores[s] = min(float(np.linalg.norm(coords)) / norm, 1.0)
        except ZeroNormError:
            scores[s] = mode.minimum_score
    return scores


def alignment_distribution(
    scores: dict[int, float],
    visible: VisibleSet,
    tau_blk: float = DEFAULT_BLOCK_TEMPERATURE,
    step: int = 0,
) -> AlignmentDistribution:
    """Softmax of the scores over exactly the visible support."""
    if len(visible) == 0:
        raise EmptyVisibleSetError("cannot build a distribution on an empty visible set")
    if set(scores.keys()) != set(visible.members):
        raise ValueError(
            f"score keys {sorted(scores)} do not match visible set {visible.members}"
        )
    raw = np.array([scores[s] for s in visible.members], dtype=np.float64)
    dist = softmax(raw, temperature=tau_blk, support=visible.members)
    return AlignmentDistribution(
        dist=dist,
        step=step,
        temperature_used=tau_blk,
        scores={s: float(scores[s]) for s in visible.members},
    )


def score_frame(
    frame: ActivationFrame,
    reasoning_map: EvolutionVector | SubspaceBasis,
    mode: SimilarityMode = SimilarityMode(),
    tau_blk: float = DEFAULT_BLOCK_TEMPERATURE,
) -> AlignmentDistribution:
    """Convenience composition of scoring and softmax for one frame."""
    scores = score_alignment(frame, reasoning_map, mode)
    return alignment_distribution(scores, frame.visible, tau_blk, frame.step)
