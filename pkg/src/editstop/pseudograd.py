"""Offline pseudo-gradient analysis of recorded denoising trajectories.

During fine-tuning the optimizer sees true loss gradients; at inference
there is no loss, but consecutive denoising steps still define a natural
objective: how far the committed tokens' predictive distributions moved
between step ``t`` and step ``t+1``. Backpropagating that step-to-step
divergence through the adapter down-projections yields a pseudo-gradient
whose root-mean-square magnitude can be compared against the band of
gradient magnitudes seen in training. This module computes those
pseudo-gradients by re-running the recorded forward passes, summarizes
them, and detects the step at which their magnitude settles into the
training band.

Everything here is post-hoc: the analyzer consumes finished trajectories
and never feeds back into the stopping decision.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    EmptyInputError,
    MissingStepError,
    TooFewSamplesError,
    WindowTooShortError,
)
from .generate import DenoiseTrajectory
from .model import (
    ToyModel,
    backward_lora,
    forward,
    parse_module_path,
    predictive_distributions,
)

DEFAULT_PERSISTENCE = 3


@dataclass(frozen=True)
class PseudoGradConfig:
    """Which adapters to differentiate and how the step-t side is treated.

    ``modules=None`` selects the model's default tapped projection. The
    step-t distribution is a fixed reference by default; setting
    ``differentiate_reference`` also propagates through the earlier
    step's forward pass.
    """

    modules: Optional[tuple[str, ...]] = None
    differentiate_reference: bool = False
    persistence: int = DEFAULT_PERSISTENCE

    def __post_init__(self):
        if self.persistence < 1:
            raise ValueError(f"persistence must be >= 1, got {self.persistence}")


@dataclass(frozen=True)
class SftBand:
    """Mean and sample deviation of training-time gradient magnitudes."""

    mu: float
    sigma: float
    n_steps: int

    def __post_init__(self):
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.n_steps < 2:
            raise TooFewSamplesError(
                f"a band needs at least 2 steps, got {self.n_steps}"
            )

    def contains(self, value: float) -> bool:
        return self.mu - self.sigma <= value <= self.mu + self.sigma


@dataclass(frozen=True)
class PseudoGradRow:
    step: int
    rms_value: float
    in_band: bool


@dataclass
class PseudoGradTrace:
    rows: list[PseudoGradRow]
    band: SftBand
    convergence_step: Optional[int]


def rms(matrix) -> float:
    """Root-mean-square of all entries."""
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.size == 0:
        raise EmptyInputError("rms of an empty matrix is undefined")
    return float(np.sqrt(np.mean(np.square(arr))))


def sft_band(rms_trace: Sequence[float]) -> SftBand:
    """Sample mean and sample standard deviation (n-1 denominator)."""
    values = np.asarray(list(rms_trace), dtype=np.float64)
    if values.size < 2:
        raise TooFewSamplesError(
            f"band estimation needs >= 2 values, got {values.size}"
        )
    return SftBand(
        mu=float(values.mean()),
        sigma=float(values.std(ddof=1)),
        n_steps=int(values.size),
    )


def detect_convergence(
    trace: Sequence[float], band: SftBand, persistence: int = DEFAULT_PERSISTENCE
) -> Optional[int]:
    """Index of the first entry opening a run of ``persistence`` in-band values.

    Detection is first-hit: later excursions outside the band never
    retract the returned index. Returns None when no such run exists.
    """
    if persistence < 1:
        raise ValueError(f"persistence must be >= 1, got {persistence}")
    flags = [band.contains(float(v)) for v in trace]
    run = 0
    for i, ok in enumerate(flags):
        run = run + 1 if ok else 0
        if run >= persistence:
            return i - persistence + 1
    return None


def _selected_keys(model: ToyModel, config: PseudoGradConfig) -> tuple[str, ...]:
    modules = (
        config.modules if config.modules is not None else (model.default_tap().module,)
    )
    keys = []
    for module in modules:
        parse_module_path(module)
        key = f"{module}.lora_b"
        if key not in model.lora:
            raise KeyError(f"unknown adapter module {module!r}")
        keys.append(key)
    return tuple(keys)


def _step_input(model: ToyModel, trajectory: DenoiseTrajectory, step: int) -> np.ndarray:
    """Full-sequence token input to the forward pass of ``step``."""
    L = model.cfg.block_length
    if step == 1:
        block = np.full(L, model.cfg.mask_id, dtype=np.int64)
    else:
        block = np.asarray(trajectory.records[step - 2].tokens, dtype=np.int64)
    prefix = np.asarray(trajectory.prefix, dtype=np.int64)
    if prefix.size != trajectory.block_index * L:
        raise MissingStepError(
            f"trajectory prefix has {prefix.size} tokens, block {trajectory.block_index}"
            f" needs {trajectory.block_index * L}"
        )
    return np.concatenate([prefix, block])


def _check_pair(trajectory: DenoiseTrajectory, step: int) -> None:
    if step < 1 or step + 1 > len(trajectory.records):
        raise MissingStepError(
            f"steps {step} and {step + 1} are not both recorded"
            f" (trajectory has {len(trajectory.records)} steps)"
        )


def _pair_distributions(model: ToyModel, trajectory: DenoiseTrajectory, step: int):
    """Predictive distributions at ``step`` and ``step+1`` plus the support."""
    cfg = model.cfg
    lo = trajectory.block_index * cfg.block_length
    hi = lo + cfg.block_length
    res_t = forward(model, _step_input(model, trajectory, step)[None, :], taps=())
    res_t1 = forward(model, _step_input(model, trajectory, step + 1)[None, :], taps=())
    p_t = predictive_distributions(res_t.logits[0, lo:hi], cfg.vocab_size)
    p_t1 = predictive_distributions(res_t1.logits[0, lo:hi], cfg.vocab_size)
    support = trajectory.records[step].frame.visible.members
    return p_t, p_t1, support, lo


def step_kl_objective(
    model: ToyModel,
    trajectory: DenoiseTrajectory,
    step: int,
) -> float:
    """Summed step-to-step divergence over the step's committed support."""
    _check_pair(trajectory, step)
    p_t, p_t1, support, lo = _pair_distributions(model, trajectory, step)
    total = 0.0
    for s in support:
        p = p_t[s - lo].probs
        q = p_t1[s - lo].probs
        total += float(np.sum(p * (np.log(p) - np.log(q))))
    return total


def pseudo_gradient(
    model: ToyModel,
    trajectory: DenoiseTrajectory,
    step: int,
    config: PseudoGradConfig | None = None,
) -> dict[str, np.ndarray]:
    """Gradient of the step divergence through the selected down-projections.

    Re-runs the recorded forward passes for ``step`` and ``step+1`` and
    backpropagates the summed divergence over the later step's committed
    support. The earlier step's distributions act as constants unless the
    config differentiates the reference branch too.
    """
    config = config if config is not None else PseudoGradConfig()
    _check_pair(trajectory, step)
    keys = _selected_keys(model, config)
    cfg = model.cfg
    lo = trajectory.block_index * cfg.block_length
    hi = lo + cfg.block_length
    support = trajectory.records[step].frame.visible.members

    res_t = forward(
        model,
        _step_input(model, trajectory, step)[None, :],
        taps=(),
        record=config.differentiate_reference,
    )
    res_t1 = forward(model, _step_input(model, trajectory, step + 1)[None, :], taps=(), record=True)
    p_t = predictive_distributions(res_t.logits[0, lo:hi], cfg.vocab_size)
    p_t1 = predictive_distributions(res_t1.logits[0, lo:hi], cfg.vocab_size)

    real = cfg.vocab_size - 1
    dlogits_t1 = np.zeros_like(res_t1.logits)
    for s in support:
        p = p_t[s - lo].probs
        q = p_t1[s - lo].probs
        dlogits_t1[0, s, :real] = q - p
    grads = backward_lora(model, res_t1, dlogits_t1)
    out = {key: grads[key] for key in keys}

    if config.differentiate_reference:
        dlogits_t = np.zeros_like(res_t.logits)
        for s in support:
            p = p_t[s - lo].probs
            q = p_t1[s - lo].probs
            log_ratio = np.log(p) - np.log(q)
            kl = float(np.sum(p * log_ratio))
            dlogits_t[0, s, :real] = p * (log_ratio - kl)
        ref_grads = backward_lora(model, res_t, dlogits_t)
        out = {key: out[key] + ref_grads[key] for key in keys}
    return out


def analyze_trajectory(
    model: ToyModel,
    trajectory: DenoiseTrajectory,
    band: SftBand,
    config: PseudoGradConfig | None = None,
) -> PseudoGradTrace:
    """Pseudo-gradient magnitude trace for every consecutive step pair."""
    config = config if config is not None else PseudoGradConfig()
    if len(trajectory.records) < 2:
        raise WindowTooShortError(
            f"need at least 2 recorded steps, got {len(trajectory.records)}"
        )
    rows: list[PseudoGradRow] = []
    values: list[float] = []
    for step in range(1, len(trajectory.records)):
        grads = pseudo_gradient(model, trajectory, step, config)
        value = rms(np.concatenate([g.ravel() for g in grads.values()]))
        values.append(value)
        rows.append(PseudoGradRow(step=step, rms_value=value, in_band=band.contains(value)))
    index = detect_convergence(values, band, config.persistence)
    convergence_step = rows[index].step if index is not None else None
    return PseudoGradTrace(rows=rows, band=band, convergence_step=convergence_step)


def pseudograd_to_csv(trace: PseudoGradTrace) -> str:
    """Trace rows as CSV text (step, rms, in_band, t_conv)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "rms", "in_band", "t_conv"])
    conv = "" if trace.convergence_step is None else trace.convergence_step
    for row in trace.rows:
        writer.writerow([row.step, repr(row.rms_value), int(row.in_band), conv])
    return buf.getvalue()
