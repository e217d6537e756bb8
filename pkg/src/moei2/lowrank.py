"""Intra-expert decomposition: importance-weighted ranks and activation-whitened
truncated SVD of every expert matrix."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics
from .errors import BoundsError, DecompositionError, FactorizationError
from .importance import ImportanceReport
from .model import SLOTS, Expert, Factored, MoEModel, copy_model, silu
from .backprop import forward_tape

DEFAULT_DAMPING = 1e-6  # relative to the Gram's mean diagonal
_FLOOR_GUARD = 1e-9


@dataclass
class RankPlan:
    ranks: list[list[int]]
    target_avg_rank: float
    alpha: float = 0.15
    epsilon: float = 1e-6
    mode: str = "whitened"
    uniform: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RankPlan":
        return cls(**d)


def break_even_rank(d_model: int, d_ff: int) -> float:
    """Ranks below this value make a factored slot smaller than the dense one."""
    return d_model * d_ff / (d_model + d_ff)


def allocate_ranks(
    report: ImportanceReport,
    target_avg_rank: float,
    dims: tuple[int, int],
    alpha: float = 0.15,
    epsilon: float = 1e-6,
    uniform: bool = False,
    mode: str = "whitened",
) -> RankPlan:
    """Per-expert ranks: floor of the smoothed importance share of the layer's
    rank budget ``target_avg_rank * n_experts``, clamped to [1, min(dims)]."""
    max_rank = min(dims)
    if target_avg_rank < 1:
        raise BoundsError("target average rank must be >= 1")
    if target_avg_rank > max_rank:
        raise BoundsError(f"target average rank {target_avg_rank} exceeds min dimension {max_rank}")
    if mode not in ("plain", "whitened"):
        raise ValueError(f"unknown decomposition mode {mode!r}")
    if target_avg_rank >= break_even_rank(*dims):
        warnings.warn(
            f"rank {target_avg_rank} >= {break_even_rank(*dims):.2f}: factored experts will not be smaller",
            stacklevel=2,
        )
    ranks = []
    for row in report.expert_importance:
        n = len(row)
        if uniform:
            ranks.append([int(target_avg_rank)] * n)
            continue
        w = np.power(np.asarray(row, dtype=float) + epsilon, alpha)
        raw = w / w.sum() * target_avg_rank * n
        ranks.append([int(min(max(math.floor(x + _FLOOR_GUARD), 1), max_rank)) for x in raw])
    return RankPlan(ranks, target_avg_rank, alpha, epsilon, mode, uniform)


@dataclass
class ActivationStats:
    """Per-expert Gram matrices of slot inputs over routed calibration tokens.

    gate and up share the mixed hidden state as input, so they share a Gram.
    """

    inputs: list[list[np.ndarray]]  # d_model x d_model
    hidden: list[list[np.ndarray]]  # d_ff x d_ff, input of down
    token_count: list[list[int]]

    def gram(self, layer: int, expert: int, slot: str) -> np.ndarray:
        return self.hidden[layer][expert] if slot == "down" else self.inputs[layer][expert]

    def starved(self) -> list[tuple[int, int]]:
        return [(i, j) for i, row in enumerate(self.token_count) for j, c in enumerate(row) if c == 0]


def capture_activations(model: MoEModel, calib, batch_size: int = 64) -> ActivationStats:
    d, f = model.config.d_model, model.config.d_ff
    seqs = calib.sequences if hasattr(calib, "sequences") else np.atleast_2d(np.asarray(calib))
    inputs = [[np.zeros((d, d)) for _ in layer.experts] for layer in model.layers]
    hidden = [[np.zeros((f, f)) for _ in layer.experts] for layer in model.layers]
    counts = [[0 for _ in layer.experts] for layer in model.layers]
    for s in range(0, seqs.shape[0], batch_size):
        tape = forward_tape(model, seqs[s : s + batch_size])
        for i, rec in enumerate(tape.caches):
            for pos, rows, _ in rec.dispatch:
                j = rec.live[pos]
                e = model.layers[i].experts[j]
                x = rec.mix[rows]
                z = silu(x @ e.weight("gate").T) * (x @ e.weight("up").T)
                inputs[i][j] += x.T @ x
                hidden[i][j] += z.T @ z
                counts[i][j] += rows.size
    return ActivationStats(inputs, hidden, counts)


def whitening_factor(gram: np.ndarray, damping: float = DEFAULT_DAMPING) -> np.ndarray:
    """Lower-triangular S with S S^T = gram + damping * mean(diag) * I."""
    scale = float(np.mean(np.diag(gram)))
    if scale <= 0.0:
        gram, scale = np.eye(gram.shape[0]), 1.0
    return numerics.cholesky(gram, damping * scale)


def decompose_matrix(
    w: np.ndarray, gram: np.ndarray | None, r: int, mode: str = "whitened", damping: float = DEFAULT_DAMPING
) -> tuple[np.ndarray, np.ndarray]:
    """Rank-``r`` factors (a, b) with a @ b approximating ``w``.

    ``plain`` minimizes ||w - ab||_F. ``whitened`` minimizes ||(w - ab) X||_F
    where ``gram = X X^T``.
    """
    w = numerics.as_matrix(w, "w")
    if not 1 <= r <= min(w.shape):
        raise BoundsError(f"rank {r} outside [1, {min(w.shape)}] for shape {w.shape}")
    if mode == "plain":
        svd = numerics.truncated_svd(w, r)
        return svd.u * svd.singular_values, svd.v.T.copy()
    if mode != "whitened":
        raise ValueError(f"unknown decomposition mode {mode!r}")
    if gram is None or gram.shape != (w.shape[1], w.shape[1]):
        raise ValueError(f"gram must be {w.shape[1]}x{w.shape[1]}")
    try:
        s = whitening_factor(gram, damping)
    except FactorizationError as exc:
        raise DecompositionError(f"whitening failed at pivot {exc.pivot}") from exc
    svd = numerics.truncated_svd(w @ s, r)
    return svd.u * svd.singular_values, numerics.triangular_solve(s, svd.v.T, side="right")


def apply_decomposition(model: MoEModel, plan: RankPlan, stats: ActivationStats | None = None) -> MoEModel:
    """Replace every expert matrix by a factor pair at that expert's rank."""
    if [len(r) for r in plan.ranks] != model.expert_counts:
        raise ValueError("rank plan does not cover every surviving expert")
    if plan.mode == "whitened" and stats is None:
        raise ValueError("whitened decomposition needs activation statistics")
    out = copy_model(model)
    for i, layer in enumerate(out.layers):
        for j, e in enumerate(layer.experts):
            r = plan.ranks[i][j]
            slots = {}
            for s in SLOTS:
                w = e.weight(s)
                if not 1 <= r <= min(w.shape):
                    raise BoundsError(f"rank {r} infeasible for layer {i}, expert {j}, slot {s} of shape {w.shape}")
                gram = stats.gram(i, j, s) if stats is not None else None
                a, b = decompose_matrix(w, gram, r, plan.mode)
                slots[s] = Factored(a, b)
            layer.experts[j] = Expert(**slots)
    return out


def reconstruction_table(original: MoEModel, compressed: MoEModel, stats: ActivationStats | None = None) -> list[dict]:
    """Per-slot relative weight error and, with stats, relative activation error."""
    rows = []
    for i, (lo, lc) in enumerate(zip(original.layers, compressed.layers)):
        for j, (eo, ec) in enumerate(zip(lo.experts, lc.experts)):
            for s in SLOTS:
                w, what = eo.weight(s), ec.weight(s)
                diff = w - what
                row = {
                    "layer": i,
                    "expert": j,
                    "slot": s,
                    "rank": getattr(ec.slot(s), "rank", None),
                    "weight_rel_error": numerics.frobenius_norm(diff) / max(numerics.frobenius_norm(w), 1e-300),
                }
                if stats is not None:
                    g = stats.gram(i, j, s)
                    num = float(np.einsum("ij,jk,ik->", diff, g, diff))
                    den = float(np.einsum("ij,jk,ik->", w, g, w))
                    row["activation_rel_error"] = math.sqrt(max(num, 0.0) / den) if den > 0 else None
                rows.append(row)
    return rows
