"""Supervised fine-tuning of the adapter parameters with dynamics capture.

Each optimization step masks a random subset of every sample's target
block, takes the masked-token cross entropy, and applies one AdamW step
to all adapter tensors. For every configured capture target the
optimizer's update-magnitude tensor is accumulated across steps, and the
per-step RMS of the first target's raw gradient is traced for the
reference band used by the post-hoc gradient analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .capture import (
    AdamWConfig,
    EvolutionAccumulator,
    EvolutionVector,
    MomentState,
    adamw_step,
    reduce_row_energy,
    reduce_row_mean,
)
from .errors import TrainingDivergedError
from .model import ToyModel, backward_lora, forward, masked_cross_entropy, parse_module_path
from .tasks import SyntheticTask

MASKING_RATES = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class CaptureSpec:
    """One adapter tensor to track during training.

    ``reduction`` picks how the accumulated update tensor is summarized
    into a per-dimension vector: L2 norm per output row or mean absolute
    value per output row.
    """

    module: str
    adapter: str = "b"
    reduction: str = "energy"

    def __post_init__(self):
        parse_module_path(self.module)
        if self.adapter not in ("a", "b"):
            raise ValueError(f"adapter must be 'a' or 'b', got {self.adapter!r}")
        if self.reduction not in ("energy", "mean"):
            raise ValueError(
                f"reduction must be 'energy' or 'mean', got {self.reduction!r}"
            )

    @property
    def param_key(self) -> str:
        return f"{self.module}.lora_{self.adapter}"

    @property
    def metadata_id(self) -> str:
        return self.param_key


@dataclass
class SftResult:
    model: ToyModel
    evolution: dict[str, EvolutionVector]
    evolution_tensors: dict[str, np.ndarray]
    rms_trace: list[float]
    loss_trace: list[float]


def mask_targets(
    seqs: np.ndarray, block_length: int, mask_id: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Mask a random fraction of each sample's target block.

    Returns the masked input and the boolean loss mask. The prompt block
    is always left visible.
    """
    masked = seqs.copy()
    loss_mask = np.zeros(seqs.shape, dtype=bool)
    for i in range(seqs.shape[0]):
        rate = MASKING_RATES[rng.integers(0, len(MASKING_RATES))]
        n_mask = max(1, int(round(rate * block_length)))
        pos = rng.choice(block_length, size=n_mask, replace=False) + block_length
        masked[i, pos] = mask_id
        loss_mask[i, pos] = True
    return masked, loss_mask


def reduce_capture(spec: CaptureSpec, tensor: np.ndarray, rank: int) -> EvolutionVector:
    # Adapter A is (rank, d_model): transpose so the summary indexes the
    # model dimension, matching the activation vectors it will score.
    t = tensor if spec.adapter == "b" else tensor.T
    if spec.reduction == "energy":
        return reduce_row_energy(t, spec.metadata_id, rank)
    return reduce_row_mean(t, spec.metadata_id, rank)


def sft_train(
    model: ToyModel,
    task: SyntheticTask,
    steps: int,
    adamw_cfg: AdamWConfig | None = None,
    captures: tuple[CaptureSpec, ...] | None = None,
    rng: np.random.Generator | None = None,
    batch_size: int = 16,
) -> SftResult:
    """Train the adapters in place and capture their update dynamics.

    Deterministic given the generator state; the model's base tensors
    are never touched.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if adamw_cfg is None:
        adamw_cfg = AdamWConfig()
    if captures is None:
        captures = (CaptureSpec(model.default_tap().module),)
    if not captures:
        raise ValueError("need at least one capture target")
    if rng is None:
        rng = np.random.default_rng(model.cfg.seed + 1)
    cfg = model.cfg
    moments = {key: MomentState.zeros(val.shape) for key, val in model.lora.items()}
    accums = {
        spec.metadata_id: EvolutionAccumulator(model.lora[spec.param_key].shape)
        for spec in captures
    }
    rms_key = captures[0].param_key
    rms_trace: list[float] = []
    loss_trace: list[float] = []

    for step in range(steps):
        prompts, targets = task.sample_batch(rng, batch_size)
        seqs = np.concatenate([prompts, targets], axis=1)
        masked, loss_mask = mask_targets(seqs, cfg.block_length, cfg.mask_id, rng)
        res = forward(model, masked, taps=(), record=True)
        loss, dlogits = masked_cross_entropy(res.logits, seqs, loss_mask)
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss {loss} at optimization step {step}"
            )
        grads = backward_lora(model, res, dlogits)
        updates: dict[str, np.ndarray] = {}
        for key in sorted(model.lora):
            moments[key], update = adamw_step(moments[key], grads[key], adamw_cfg)
            updates[key] = update
            model.lora[key] = model.lora[key] - adamw_cfg.learning_rate * (
                update + adamw_cfg.weight_decay * model.lora[key]
            )
        for spec in captures:
            accums[spec.metadata_id].accumulate(updates[spec.param_key])
        g = grads[rms_key]
        rms_trace.append(float(np.sqrt(np.mean(g * g))))
        loss_trace.append(loss)

    tensors = {mid: acc.finalize() for mid, acc in accums.items()}
    evolution = {
        spec.metadata_id: reduce_capture(spec, tensors[spec.metadata_id], cfg.lora_rank)
        for spec in captures
    }
    return SftResult(
        model=model,
        evolution=evolution,
        evolution_tensors=tensors,
        rms_trace=rms_trace,
        loss_trace=loss_trace,
    )
