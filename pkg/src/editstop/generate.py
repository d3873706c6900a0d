"""Block-wise masked denoising with optional early stopping and token freezing.

The sampler fills one block of ``block_length`` positions at a time. Each
denoising step runs a full forward pass, commits a fixed quota of the most
confident still-masked positions, and emits an activation frame over the
committed set. Under the monitored policies that frame drives the alignment
distribution whose stability decides when to cut the remaining steps short.

Commitment schedule: ``ceil(block_length / budget)`` tokens per step, ties
broken toward the lowest position index, so a run with budget ``T`` fully
commits the block no later than step ``T``. The fixed policy always runs the
whole budget; a monitored run that stops at step ``t`` commits every
remaining position from step ``t``'s predictive distributions, keeping the
total number of forward passes equal to ``t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .alignment import (
    ActivationFrame,
    AlignmentDistribution,
    SimilarityMode,
    VisibleSet,
    score_frame,
)
from .capture import EvolutionVector, SubspaceBasis
from .certify import Certificate, MarginReport, build_certificate
from .errors import ScheduleExhaustedError
from .freeze import FreezeConfig, FreezeEvent, TokenFreezer
from .model import ToyModel, TapSpec, forward, predictive_distributions
from .monitor import StabilityMonitor, StabilityState, StopConfig, StopDecision, StopReason

POLICY_KINDS = ("fixed", "edit", "edit_freeze")
DEFAULT_STEP_BUDGET = 32


@dataclass(frozen=True)
class PolicyConfig:
    """What the sampler does besides denoising.

    ``fixed`` runs every budgeted step. ``edit`` wires the stability
    monitor and stops once the alignment distribution settles.
    ``edit_freeze`` additionally pins per-token alignment inputs once
    their local readouts stop moving.
    """

    kind: str = "fixed"
    stop: StopConfig = field(default_factory=StopConfig)
    freeze: FreezeConfig = field(default_factory=FreezeConfig)
    strict_certificates: bool = False

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"kind must be one of {POLICY_KINDS}, got {self.kind!r}")

    @property
    def monitored(self) -> bool:
        return self.kind != "fixed"

    @property
    def freezing(self) -> bool:
        return self.kind == "edit_freeze"


@dataclass(frozen=True)
class StepRecord:
    """One denoising step: what was committed and what the tap saw."""

    step: int
    committed: tuple[int, ...]
    tokens: tuple[int, ...]
    frame: ActivationFrame
    alignment: Optional[AlignmentDistribution]


@dataclass
class DenoiseTrajectory:
    block_index: int
    records: list[StepRecord]
    final_commit: tuple[int, ...]
    tokens: tuple[int, ...]
    # Committed tokens of every earlier block; kept so offline analyses
    # can re-run any step's forward pass from the trajectory alone.
    prefix: tuple[int, ...] = ()

    def __post_init__(self):
        seen: set[int] = set()
        for rec in self.records:
            if not set(rec.frame.visible.members) >= seen:
                raise ScheduleExhaustedError(
                    f"visible set shrank at step {rec.step} of block {self.block_index}"
                )
            seen = set(rec.frame.visible.members)

    @property
    def steps_used(self) -> int:
        return len(self.records)


@dataclass
class BlockResult:
    block_index: int
    trajectory: DenoiseTrajectory
    stop_decision: Optional[StopDecision]
    monitor_state: Optional[StabilityState]
    certificate: Optional[Certificate]
    freeze_events: tuple[FreezeEvent, ...]
    rejected_stops: tuple[int, ...]

    @property
    def steps_used(self) -> int:
        return self.trajectory.steps_used

    @property
    def stopped_early(self) -> bool:
        return (
            self.stop_decision is not None
            and self.stop_decision.reason is StopReason.RUN_LENGTH_MET
        )


@dataclass
class GenerateResult:
    tokens: tuple[int, ...]
    blocks: list[BlockResult]
    policy: PolicyConfig
    budget: int

    @property
    def block_steps(self) -> tuple[int, ...]:
        return tuple(b.steps_used for b in self.blocks)

    @property
    def avg_steps(self) -> float:
        return float(np.mean(self.block_steps))


@dataclass(frozen=True)
class AlignmentProbeHandle:
    """Counterfactual re-execution of the alignment readout.

    Satisfies the probing protocol used by the coupling estimator: the
    block state is an activation frame, and a perturbation ``delta`` is
    added to one token's activation before the alignment softmax is
    recomputed. Only the readout is re-run; committed tokens and model
    parameters are untouched, which is exactly the counterfactual the
    freeze-safety bound needs.
    """

    reasoning_map: EvolutionVector | SubspaceBasis
    mode: SimilarityMode = field(default_factory=SimilarityMode)
    tau_blk: float = 1.0

    @property
    def activation_dim(self) -> int:
        return self.reasoning_map.d_out

    def counterfactual_distribution(
        self, block_state: ActivationFrame, token: int, delta: Optional[np.ndarray]
    ):
        if token not in block_state.activations:
            raise KeyError(f"token {token} is not visible in the probed frame")
        acts = {s: np.array(v) for s, v in block_state.activations.items()}
        if delta is not None:
            acts[token] = acts[token] + np.asarray(delta, dtype=np.float64)
        frame = ActivationFrame(block_state.step, acts, block_state.visible)
        return score_frame(frame, self.reasoning_map, self.mode, self.tau_blk).dist


def _commit_from(dist, tokens: np.ndarray, position: int) -> int:
    """Write the argmax real token at one absolute position."""
    choice = int(dist.support[int(np.argmax(dist.probs))])
    tokens[position] = choice
    return choice


def denoise_block(
    model: ToyModel,
    prefix: np.ndarray,
    block_index: int,
    budget: int = DEFAULT_STEP_BUDGET,
    policy: PolicyConfig | None = None,
    reasoning_map: EvolutionVector | SubspaceBasis | None = None,
    mode: SimilarityMode | None = None,
    tap: TapSpec | None = None,
    freeze_basis: SubspaceBasis | None = None,
    alpha_hat: float | None = None,
) -> BlockResult:
    """Denoise one block given all earlier tokens.

    ``prefix`` holds the committed tokens of every earlier block, so its
    length must be ``block_index * block_length``. Monitored policies
    require ``reasoning_map``; the freezing policy additionally requires
    ``freeze_basis``. ``alpha_hat`` enables the tail-sum side of the
    stopping certificate when available.
    """
    policy = policy if policy is not None else PolicyConfig()
    mode = mode if mode is not None else SimilarityMode()
    cfg = model.cfg
    L = cfg.block_length
    if budget < 1:
        raise ScheduleExhaustedError(f"step budget must be >= 1, got {budget}")
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    if prefix.size != block_index * L:
        raise ValueError(
            f"prefix length {prefix.size} != {block_index} blocks of {L} tokens"
        )
    if (block_index + 1) * L > cfg.max_positions:
        raise ValueError(f"block {block_index} exceeds {cfg.max_blocks} blocks")
    if policy.monitored and reasoning_map is None:
        raise ValueError(f"policy {policy.kind!r} requires a reasoning map")
    if policy.freezing and freeze_basis is None:
        raise ValueError("policy 'edit_freeze' requires a freeze basis")

    tap = tap if tap is not None else model.default_tap()
    stop_cfg = policy.stop.for_block(block_index)
    monitor = StabilityMonitor(policy.stop, block_index) if policy.monitored else None
    freezer = TokenFreezer(freeze_basis, policy.freeze) if policy.freezing else None

    lo = block_index * L
    tokens = np.concatenate([prefix, np.full(L, cfg.mask_id, dtype=np.int64)])
    committed = np.zeros(L, dtype=bool)
    quota = math.ceil(L / budget)
    block_members = tuple(range(lo, lo + L))

    records: list[StepRecord] = []
    stop_decision: Optional[StopDecision] = None
    certificate: Optional[Certificate] = None
    rejected: list[int] = []
    final_commit: tuple[int, ...] = ()

    for step in range(1, budget + 1):
        result = forward(model, tokens[None, :], taps=(tap,))
        acts = result.taps[tap][0]
        dists = predictive_distributions(result.logits[0, lo : lo + L], cfg.vocab_size)

        # Quota commitment: most confident masked positions, lowest index first.
        newly: list[int] = []
        open_positions = [i for i in range(L) if not committed[i]]
        if open_positions:
            ranked = sorted(
                open_positions, key=lambda i: (-float(dists[i].probs.max()), i)
            )
            for i in ranked[: min(quota, len(open_positions))]:
                _commit_from(dists[i], tokens, lo + i)
                committed[i] = True
                newly.append(lo + i)

        effective = {lo + i: acts[lo + i] for i in range(L)}
        if freezer is not None:
            whole = ActivationFrame(step, effective, VisibleSet(block_members))
            effective, frozen_now = freezer.process(whole)
            for frozen_token in frozen_now:
                i = int(frozen_token) - lo
                if not committed[i]:
                    # A frozen readout on a masked slot: its prediction is
                    # settled, so commit it outside the quota.
                    _commit_from(dists[i], tokens, lo + i)
                    committed[i] = True
                    newly.append(lo + i)

        visible = VisibleSet(tuple(lo + i for i in range(L) if committed[i]))
        frame = ActivationFrame(step, {p: effective[p] for p in visible.members}, visible)
        alignment = (
            score_frame(frame, reasoning_map, mode, stop_cfg.tau_blk)
            if reasoning_map is not None
            else None
        )

        if monitor is not None and alignment is not None:
            decision = monitor.observe(alignment)
            if decision.stop:
                margin = MarginReport.from_distribution(alignment.dist, step)
                cert = build_certificate(step, margin, stop_cfg, alpha_hat=alpha_hat)
                accept = True
                if policy.strict_certificates:
                    accept = cert.local_pass and cert.global_pass is not False
                if accept:
                    stop_decision = decision
                    certificate = cert
                    extra: list[int] = []
                    for i in range(L):
                        if not committed[i]:
                            _commit_from(dists[i], tokens, lo + i)
                            committed[i] = True
                            extra.append(lo + i)
                    final_commit = tuple(extra)
                else:
                    # Certificate refused the stop: release the latch and
                    # keep denoising until a certified step shows up.
                    monitor.state.stopped_at = None
                    rejected.append(step)

        records.append(
            StepRecord(
                step=step,
                committed=tuple(newly),
                tokens=tuple(int(t) for t in tokens[lo : lo + L]),
                frame=frame,
                alignment=alignment,
            )
        )
        if stop_decision is not None:
            break

    if not committed.all():
        missing = [lo + i for i in range(L) if not committed[i]]
        raise ScheduleExhaustedError(
            f"budget {budget} ended with masked positions {missing}"
        )
    if monitor is not None and stop_decision is None:
        stop_decision = monitor.exhausted(records[-1].step)

    trajectory = DenoiseTrajectory(
        block_index=block_index,
        records=records,
        final_commit=final_commit,
        tokens=tuple(int(t) for t in tokens[lo : lo + L]),
        prefix=tuple(int(t) for t in prefix),
    )
    return BlockResult(
        block_index=block_index,
        trajectory=trajectory,
        stop_decision=stop_decision,
        monitor_state=monitor.state if monitor is not None else None,
        certificate=certificate,
        freeze_events=tuple(freezer.events) if freezer is not None else (),
        rejected_stops=tuple(rejected),
    )


def generate(
    model: ToyModel,
    prompt: np.ndarray,
    seq_len: int,
    policy: PolicyConfig | None = None,
    budget: int = DEFAULT_STEP_BUDGET,
    reasoning_map: EvolutionVector | SubspaceBasis | None = None,
    mode: SimilarityMode | None = None,
    tap: TapSpec | None = None,
    freeze_basis: SubspaceBasis | None = None,
    alpha_hat: float | None = None,
) -> GenerateResult:
    """Denoise every block after the prompt, left to right."""
    policy = policy if policy is not None else PolicyConfig()
    cfg = model.cfg
    L = cfg.block_length
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if seq_len % L != 0:
        raise ValueError(f"seq_len {seq_len} is not a multiple of block length {L}")
    if prompt.size % L != 0:
        raise ValueError(f"prompt length {prompt.size} is not a multiple of {L}")
    if not prompt.size < seq_len:
        raise ValueError(f"prompt length {prompt.size} leaves no block to denoise")
    if seq_len > cfg.max_positions:
        raise ValueError(f"seq_len {seq_len} exceeds {cfg.max_positions} positions")

    tokens = prompt.copy()
    blocks: list[BlockResult] = []
    for block_index in range(prompt.size // L, seq_len // L):
        block = denoise_block(
            model,
            tokens,
            block_index,
            budget=budget,
            policy=policy,
            reasoning_map=reasoning_map,
            mode=mode,
            tap=tap,
            freeze_basis=freeze_basis,
            alpha_hat=alpha_hat,
        )
        tokens = np.concatenate([tokens, np.asarray(block.trajectory.tokens)])
        blocks.append(block)
    return GenerateResult(
        tokens=tuple(int(t) for t in tokens), blocks=blocks, policy=policy, budget=budget
    )


def generation_record(
    result: GenerateResult,
    prompt: np.ndarray,
    target: np.ndarray | None = None,
) -> str:
    """One JSON line: prompt, output, optional target, per-block steps."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    record = {
        "prompt": [int(t) for t in prompt],
        "output": [int(t) for t in result.tokens[prompt.size :]],
        "block_steps": list(result.block_steps),
        "policy": result.policy.kind,
        "budget": result.budget,
    }
    if target is not None:
        record["target"] = [int(t) for t in np.asarray(target, dtype=np.int64)]
    return json.dumps(record, sort_keys=True)
