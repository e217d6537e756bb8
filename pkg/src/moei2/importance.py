"""Expert and layer importance from masked calibration loss, and per-layer
pruning budgets derived from it."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .calibration import CalibrationSet
from .errors import InfeasibleBudgetError
from .model import MoEModel, run_layers, embed, log_softmax
from .parallel import parallel_map

# Importance reported for layers that cannot lose a single expert.
SENTINEL = 1e30


@dataclass
class ImportanceReport:
    expert_importance: list[list[float]]
    layer_importance: list[float]
    calib_fingerprint: str
    baseline_loss: float
    batch_size: int
    excluded_layers: list[int]
    expert_counts: list[int]
    top_k: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceReport":
        return cls(**d)


def batched_loss(logits: np.ndarray, sequences: np.ndarray, batch_size: int) -> float:
    """Sum over calibration batches of the batch-mean next-token loss."""
    lp = log_softmax(logits[:, :-1, :])
    nll = -np.take_along_axis(lp, sequences[:, 1:, None], axis=-1)[..., 0]
    total = 0.0
    for start in range(0, sequences.shape[0], batch_size):
        total += float(nll[start : start + batch_size].mean())
    return total


def layer_inputs(model: MoEModel, sequences: np.ndarray) -> list[np.ndarray]:
    """Hidden state entering every layer of the unmasked model."""
    h = embed(model, sequences)
    out = []
    for i in range(len(model.layers)):
        out.append(h)
        h = run_layers(model, h, i, i + 1)
    out.append(h)
    return out


def expert_importance(model: MoEModel, calib: CalibrationSet, batch_size: int = 8) -> ImportanceReport:
    """I[i][j]: calibration loss of the model with expert (i, j) removed,
    summed over batches. Layer importance is the row sum."""
    seqs = calib.sequences
    if len(seqs) == 0:
        raise ValueError("calibration set is empty")
    ins = layer_inputs(model, seqs)
    head = model.embedding.T
    baseline = batched_loss(ins[-1] @ head, seqs, batch_size)
    top_k = model.config.top_k
    L = len(model.layers)

    jobs = [(i, j) for i, layer in enumerate(model.layers) if layer.n_experts > top_k for j in range(layer.n_experts)]

    def masked(job):
        i, j = job
        h = run_layers(model, ins[i], i, L, {i: {j}})
        return batched_loss(h @ head, seqs, batch_size)

    values = dict(zip(jobs, parallel_map(masked, jobs)))
    imp, excluded = [], []
    for i, layer in enumerate(model.layers):
        if layer.n_experts <= top_k:
            excluded.append(i)
            imp.append([SENTINEL] * layer.n_experts)
        else:
            imp.append([values[(i, j)] for j in range(layer.n_experts)])
    return ImportanceReport(
        expert_importance=imp,
        layer_importance=[math.fsum(row) for row in imp],
        calib_fingerprint=calib.fingerprint(),
        baseline_loss=baseline,
        batch_size=batch_size,
        excluded_layers=excluded,
        expert_counts=model.expert_counts,
        top_k=top_k,
    )


@dataclass
class PruneBudget:
    per_layer_counts: list[int]
    overall_ratio: float
    mode: str

    @property
    def total(self) -> int:
        return sum(self.per_layer_counts)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _largest_remainder(quota: np.ndarray, target: int) -> np.ndarray:
    base = np.floor(quota).astype(int)
    short = target - int(base.sum())
    frac = quota - base
    # ties: lower layer index first
    order = sorted(range(len(quota)), key=lambda i: (-frac[i], i))
    for i in order[:short]:
        base[i] += 1
    return base


def allocate_prune_budget(report: ImportanceReport, overall_ratio: float, mode: str = "inverse-importance") -> PruneBudget:
    """Integer experts-to-remove per layer summing to round(ratio * total).

    ``inverse-importance`` gives each layer a quota proportional to
    ``M_i / normalized_importance_i``; ``uniform`` splits evenly.
    """
    if not 0.0 < overall_ratio < 1.0:
        raise ValueError(f"overall_ratio must lie in (0, 1), got {overall_ratio}")
    if mode not in ("uniform", "inverse-importance"):
        raise ValueError(f"unknown budget mode {mode!r}")
    m = np.asarray(report.expert_counts, dtype=int)
    top_k = report.top_k
    L = len(m)
    caps = np.maximum(m - top_k, 0)
    target = _round_half_up(overall_ratio * m.sum())
    if target > caps.sum():
        raise InfeasibleBudgetError(f"pruning {target} experts leaves fewer than top_k={top_k} in some layer")
    imp = np.asarray(report.layer_importance, dtype=float)

    if mode == "uniform" or not np.all(imp > 0):
        counts = np.full(L, target // L)
        counts[: target - counts.sum()] += 1
    else:
        share = imp / imp.sum()
        raw = m / share
        quota = raw * (target / raw.sum())
        counts = _largest_remainder(quota, target)

    # clamp, then hand overflow to the least important layers with room
    overflow = int(np.maximum(counts - caps, 0).sum())
    counts = np.minimum(counts, caps)
    for i in sorted(range(L), key=lambda i: (imp[i], i)):
        if overflow == 0:
            break
        room = caps[i] - counts[i]
        take = min(room, overflow)
        counts[i] += take
        overflow -= take
    return PruneBudget(per_layer_counts=[int(c) for c in counts], overall_ratio=overall_ratio, mode=mode)
