"""Recovery fine-tuning: LoRA adapters on expert matrices, trained by
teacher-logit distillation (or corpus cross-entropy) with plain SGD."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backprop import Grads, backward, ce_loss_and_grad, forward_tape, mse_loss_and_grad
from .errors import BoundsError, DivergenceError
from .model import SLOTS, Dense, Expert, Factored, LoraAdapter, MoEModel, copy_model, forward


@dataclass(frozen=True)
class TrainConfig:
    lora_rank: int = 4
    lora_alpha: float = 8.0
    learning_rate: float = 3e-4
    batch_size: int = 64
    epochs: int = 2
    momentum: float = 0.0
    seed: int = 0
    loss: str = "distill"  # or "ce"
    init_scale: float | None = None  # std of b; None means 1/sqrt(in_dim)
    targets: tuple[str, ...] = SLOTS

    def __post_init__(self):
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss not in ("distill", "ce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not set(self.targets) <= set(SLOTS):
            raise ValueError(f"targets must be drawn from {SLOTS}")


def attach_adapters(model: MoEModel, config: TrainConfig = TrainConfig(), targets=None) -> MoEModel:
    """Copy of ``model`` with a zero-delta adapter on every targeted expert slot."""
    targets = tuple(targets or config.targets)
    r = config.lora_rank
    rng = np.random.default_rng([config.seed, 0x10AA])
    out = copy_model(model)
    for i, layer in enumerate(out.layers):
        for j, e in enumerate(layer.experts):
            for s in targets:
                rows, cols = e.slot(s).shape
                if r > min(rows, cols):
                    raise BoundsError(f"lora rank {r} exceeds slot {s} dims {rows}x{cols}")
                e.adapters[s] = LoraAdapter(
                    a=np.zeros((rows, r)),
                    b=rng.normal(0.0, config.init_scale or 1.0 / np.sqrt(cols), size=(r, cols)),
                    scale=config.lora_alpha / r,
                )
    return out


def merge_adapters(model: MoEModel) -> MoEModel:
    """Fold every adapter into its base weight. Factored bases grow by the
    adapter rank so the merged weight stays exact."""
    out = copy_model(model)
    for layer in out.layers:
        for j, e in enumerate(layer.experts):
            slots = {}
            for s in SLOTS:
                base = e.slot(s)
                ad = e.adapters.get(s)
                if ad is None:
                    slots[s] = base
                elif isinstance(base, Dense):
                    slots[s] = Dense(base.w + ad.delta())
                else:
                    slots[s] = Factored(np.hstack([base.a, ad.scale * ad.a]), np.vstack([base.b, ad.b]))
            layer.experts[j] = Expert(**slots)
    return out


def adapter_items(model: MoEModel):
    for i, layer in enumerate(model.layers):
        for j, e in enumerate(layer.experts):
            for s in SLOTS:
                ad = e.adapters.get(s)
                if ad is not None:
                    yield (i, j, s), ad


def distill_loss(student: MoEModel, teacher, batch) -> float:
    """Mean squared difference of student and teacher logits over all entries.

    ``teacher`` may be a model or precomputed teacher logits.
    """
    seqs = np.atleast_2d(np.asarray(batch))
    t_logits = teacher if isinstance(teacher, np.ndarray) else forward(teacher, seqs)[0]
    s_logits = forward(student, seqs)[0]
    return mse_loss_and_grad(s_logits, t_logits)[0]


def adapter_grads_from(model: MoEModel, grads: Grads) -> dict:
    out = {}
    for (i, j, s), ad in adapter_items(model):
        dw = grads.experts[i][j][s]
        out[(i, j, s)] = (ad.scale * dw @ ad.b.T, ad.scale * ad.a.T @ dw)
    return out


def loss_and_grads(student: MoEModel, teacher, batch, loss: str = "distill") -> tuple[float, dict]:
    """Loss and gradients for every adapter, keyed by (layer, expert, slot)
    with values (dL/da, dL/db)."""
    seqs = np.atleast_2d(np.asarray(batch))
    tape = forward_tape(student, seqs)
    if loss == "distill":
        t_logits = teacher if isinstance(teacher, np.ndarray) else forward(teacher, seqs)[0]
        value, dlogits = mse_loss_and_grad(tape.logits, t_logits)
    else:
        value, dlogits = ce_loss_and_grad(tape.logits, seqs)
    return value, adapter_grads_from(student, backward(student, tape, dlogits))


def adapter_backward(student: MoEModel, teacher, batch) -> dict:
    return loss_and_grads(student, teacher, batch, "distill")[1]


@dataclass
class FinetuneResult:
    model: MoEModel
    epoch_losses: list[float]
    initial_loss: float
    steps: int


def finetune(student: MoEModel, teacher: MoEModel, data, config: TrainConfig = TrainConfig()) -> FinetuneResult:
    """SGD on adapter parameters over seeded shuffled batches.

    ``student`` must already carry adapters; it is copied, not modified.
    """
    model = copy_model(student)
    if not any(True for _ in adapter_items(model)):
        raise ValueError("student has no adapters attached")
    seqs = data.sequences if hasattr(data, "sequences") else np.atleast_2d(np.asarray(data))
    t_logits = forward(teacher, seqs)[0] if config.loss == "distill" else None

    def full_loss():
        if config.loss == "distill":
            return mse_loss_and_grad(forward(model, seqs)[0], t_logits)[0]
        return ce_loss_and_grad(forward(model, seqs)[0], seqs)[0]

    initial = full_loss()
    rng = np.random.default_rng([config.seed, 0xF17E])
    velocity = {key: (np.zeros_like(ad.a), np.zeros_like(ad.b)) for key, ad in adapter_items(model)}
    epoch_losses = []
    steps = 0
    for _ in range(config.epochs):
        order = rng.permutation(seqs.shape[0])
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            target = t_logits[idx] if t_logits is not None else None
            value, grads = loss_and_grads(model, target, seqs[idx], config.loss)
            if not math.isfinite(value) or value > 10.0 * max(initial, 1e-12):
                raise DivergenceError(f"loss {value} exceeded 10x the initial {initial}")
            losses.append(value)
            for key, ad in adapter_items(model):
                ga, gb = grads[key]
                va, vb = velocity[key]
                va *= config.momentum
                va += ga
                vb *= config.momentum
                vb += gb
                ad.a -= config.learning_rate * va
                ad.b -= config.learning_rate * vb
            steps += 1
        epoch_losses.append(float(np.mean(losses)))
    return FinetuneResult(model, epoch_losses, initial, steps)
