"""Run-length stability tracking and the early-termination decision.

Alignment distributions arrive one per denoising step. Consecutive
distributions are restricted to their common visible support and
renormalized, the step-wise KL divergence is computed, and a run-length
counter tracks how many consecutive steps stayed strictly below the
divergence threshold. The first time the counter reaches the required
span, the block is declared stable and denoising stops.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

from .alignment import (
    ActivationFrame,
    AlignmentDistribution,
    SimilarityMode,
    VisibleSet,
    score_frame,
)
from .capture import EvolutionVector, SubspaceBasis
from .errors import (
    EmptyIntersectionError,
    NonMonotoneVisibleSetError,
)
from .linalg import ProbVector, kl_divergence

DEFAULT_DELTA = 0.05
DEFAULT_OMEGA = 6


@dataclass(frozen=True)
class StopConfig:
    delta: float = DEFAULT_DELTA
    omega: int = DEFAULT_OMEGA
    tau_blk: float = 1.0
    first_block_overrides: tuple[float, int] | None = None

    def __post_init__(self):
        # delta == 0.0 is the degenerate limit: with the strict comparison
        # no step ever counts as stable, so stopping is disabled entirely.
        if math.isnan(self.delta) or self.delta < 0.0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        if self.omega < 1:
            raise ValueError(f"omega must be >= 1, got {self.omega}")
        if not self.tau_blk > 0.0:
            raise ValueError(f"tau_blk must be positive, got {self.tau_blk}")
        if self.first_block_overrides is not None:
            d, o = self.first_block_overrides
            if not d > 0.0 or o < 1:
                raise ValueError(f"bad first-block overrides {self.first_block_overrides}")

    def for_block(self, block_index: int) -> "StopConfig":
        """Config effective for one block; overrides apply to block 0 only."""
        if block_index == 0 and self.first_block_overrides is not None:
            d, o = self.first_block_overrides
            return replace(self, delta=d, omega=o, first_block_overrides=None)
        return replace(self, first_block_overrides=None)


class StopReason(Enum):
    RUN_LENGTH_MET = "run_length_met"
    BUDGET_EXHAUSTED = "budget_exhausted"
    STILL_RUNNING = "still_running"


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    step: int
    reason: StopReason
    final_counter: int

    def __post_init__(self):
        if self.stop != (self.reason is not StopReason.STILL_RUNNING):
            raise ValueError(f"stop={self.stop} inconsistent with reason={self.reason}")


@dataclass(frozen=True)
class TraceRow:
    step: int
    divergence: float  # NaN when the step was skipped (empty intersection)
    matched_support: int
    counter: int
    stopped: bool


@dataclass
class StabilityState:
    counter: int = 0
    prev_distribution: AlignmentDistribution | None = None
    divergence_trace: list[TraceRow] = field(default_factory=list)
    stopped_at: int | None = None

    def last_step(self) -> int | None:
        return self.divergence_trace[-1].step if self.divergence_trace else None


def matched_renormalize(
    curr: AlignmentDistribution, prev: AlignmentDistribution
) -> tuple[ProbVector, ProbVector, VisibleSet]:
    """Restrict both distributions to their common support and renormalize.

    Returns (current restricted, previous restricted, intersection).
    """
    inter = tuple(sorted(set(curr.dist.support) & set(prev.dist.support)))
    if not inter:
        raise EmptyIntersectionError(
            f"supports {prev.dist.support} and {curr.dist.support} are disjoint"
        )
    return curr.dist.restrict(inter), prev.dist.restrict(inter), VisibleSet(inter)


def step_divergence(p_tilde: ProbVector, q_tilde: ProbVector) -> float:
    """KL of the current restricted distribution from the previous one."""
    return kl_divergence(p_tilde, q_tilde)


def update_counter(
    state: StabilityState,
    d_t: float,
    cfg: StopConfig,
    step: int | None = None,
    matched_support: int = 0,
) -> tuple[StabilityState, StopDecision]:
    """Advance the run-length counter with one divergence observation.

    Strictly-below-threshold divergences increment; anything at or above
    the threshold resets to zero. The stop fires the first time the
    counter reaches the span.
    """
    if d_t < 0.0 or math.isnan(d_t):
        raise ValueError(f"divergence must be nonnegative, got {d_t}")
    if step is None:
        last = state.last_step()
        step = (last + 1) if last is not None else 1
    if d_t < cfg.delta:
        state.counter += 1
    else:
        state.counter = 0
    fired = state.stopped_at is None and state.counter >= cfg.omega
    if fired:
        state.stopped_at = step
    state.divergence_trace.append(
        TraceRow(step, d_t, matched_support, state.counter, fired)
    )
    if state.stopped_at is not None:
        decision = StopDecision(True, state.stopped_at, StopReason.RUN_LENGTH_MET, state.counter)
    else:
        decision = StopDecision(False, step, StopReason.STILL_RUNNING, state.counter)
    return state, decision


class StabilityMonitor:
    """Sequential consumer of alignment distributions for one block.

    Retains every observed distribution so certificate checks can replay
    the stability window after the fact.
    """

    def __init__(self, cfg: StopConfig, block_index: int = 0):
        self.cfg = cfg.for_block(block_index)
        self.state = StabilityState()
        self.distributions: list[AlignmentDistribution] = []

    def observe(self, dist: AlignmentDistribution) -> StopDecision:
        prev = self.state.prev_distribution
        if prev is not None:
            if dist.step <= prev.step:
                raise NonMonotoneVisibleSetError(
                    f"step {dist.step} does not advance past {prev.step}"
                )
            if not set(dist.dist.support) >= set(prev.dist.support):
                raise NonMonotoneVisibleSetError(
                    f"visible set {dist.dist.support} dropped tokens from {prev.dist.support}"
                )
        self.distributions.append(dist)
        if prev is None:
            # No predecessor to compare against; counter untouched.
            self.state.prev_distribution = dist
            return StopDecision(False, dist.step, StopReason.STILL_RUNNING, 0)
        try:
            p_tilde, q_tilde, inter = matched_renormalize(dist, prev)
        except EmptyIntersectionError:
            # Defensive: cannot happen under monotone unmasking. Skip the
            # step entirely, leaving the counter as it was.
            self.state.divergence_trace.append(
                TraceRow(dist.step, float("nan"), 0, self.state.counter, False)
            )
            self.state.prev_distribution = dist
            return StopDecision(
                False, dist.step, StopReason.STILL_RUNNING, self.state.counter
            )
        d_t = step_divergence(p_tilde, q_tilde)
        self.state.prev_distribution = dist
        _, decision = update_counter(
            self.state, d_t, self.cfg, step=dist.step, matched_support=len(inter)
        )
        return decision

    def exhausted(self, step: int) -> StopDecision:
        """Decision reported when the step budget ran out before stability."""
        return StopDecision(True, step, StopReason.BUDGET_EXHAUSTED, self.state.counter)


def run_block(
    activation_stream: Iterable[ActivationFrame],
    reasoning_map: EvolutionVector | SubspaceBasis,
    mode: SimilarityMode,
    cfg: StopConfig,
    max_steps: int,
    block_index: int = 0,
) -> tuple[StopDecision, StabilityState]:
    """Drive the monitor over a stream of activation frames.

    Consumes frames until the run-length stop fires or ``max_steps``
    frames have been processed, whichever comes first.
    """
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    monitor = StabilityMonitor(cfg, block_index)
    decision: StopDecision | None = None
    consumed = 0
    last_step = 0
    for frame in activation_stream:
        dist = score_frame(frame, reasoning_map, mode, monitor.cfg.tau_blk)
        decision = monitor.observe(dist)
        consumed += 1
        last_step = frame.step
        if decision.stop:
            return decision, monitor.state
        if consumed >= max_steps:
            return monitor.exhausted(last_step), monitor.state
    if decision is None:
        raise ValueError("activation stream yielded no frames")
    return monitor.exhausted(last_step), monitor.state


def trace_to_csv(state: StabilityState) -> str:
    """Divergence trace as CSV text (step, divergence, support, counter, stop)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "divergence", "matched_support", "counter", "stopped"])
    for row in state.divergence_trace:
        writer.writerow(
            [row.step, repr(row.divergence), row.matched_support, row.counter, int(row.stopped)]
        )
    return buf.getvalue()
