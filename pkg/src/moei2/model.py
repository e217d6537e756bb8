"""Toy Mixture-of-Experts language model.

Each layer mixes context with a parameter-free causal prefix mean, routes
every token to its top-k experts and adds the gated expert outputs back to
the mixed state. The output head is tied to the input embedding.
"""
from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np
from scipy.special import expit

from .errors import RoutingError

SLOTS = ("gate", "up", "down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    d_ff: int = 64
    n_layers: int = 6
    experts_per_layer: int = 8
    top_k: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "d_ff", "n_layers", "experts_per_layer", "top_k"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.top_k > self.experts_per_layer:
            raise ValueError("top_k must not exceed experts_per_layer")
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be >= d_model")


@dataclass
class Dense:
    w: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape

    def value(self) -> np.ndarray:
        return self.w

    def n_params(self) -> int:
        return int(self.w.size)


@dataclass
class Factored:
    a: np.ndarray  # out x r
    b: np.ndarray  # r x in

    def __post_init__(self):
        if self.a.shape[1] != self.b.shape[0]:
            raise ValueError(f"factor shapes {self.a.shape} and {self.b.shape} disagree")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.a.shape[0], self.b.shape[1])

    def value(self) -> np.ndarray:
        return self.a @ self.b

    def n_params(self) -> int:
        return int(self.a.size + self.b.size)


Weight = Union[Dense, Factored]


@dataclass
class LoraAdapter:
    """Trainable delta ``scale * a @ b`` on top of a frozen weight."""

    a: np.ndarray  # out x r, zero at init
    b: np.ndarray  # r x in
    scale: float

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def delta(self) -> np.ndarray:
        return self.scale * (self.a @ self.b)

    def n_params(self) -> int:
        return int(self.a.size + self.b.size)


@dataclass
class Expert:
    gate: Weight  # d_ff x d_model
    up: Weight  # d_ff x d_model
    down: Weight  # d_model x d_ff
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def slot(self, name: str) -> Weight:
        return getattr(self, name)

    def weight(self, name: str) -> np.ndarray:
        """Effective dense matrix of a slot, adapter delta included."""
        w = self.slot(name).value()
        ad = self.adapters.get(name)
        if ad is not None:
            w = w + ad.delta()
        return w

    def __call__(self, x: np.ndarray) -> np.ndarray:
        a1 = x @ self.weight("gate").T
        a2 = x @ self.weight("up").T
        return (silu(a1) * a2) @ self.weight("down").T

    def n_params(self) -> int:
        return sum(self.slot(s).n_params() for s in SLOTS)


@dataclass
class MoELayer:
    router: np.ndarray  # live_experts x d_model
    experts: list[Expert]

    def __post_init__(self):
        if self.router.shape[0] != len(self.experts):
            raise ValueError("router rows must equal expert count")

    @property
    def n_experts(self) -> int:
        return len(self.experts)


@dataclass
class MoEModel:
    config: ModelConfig
    embedding: np.ndarray  # vocab x d_model, tied head
    layers: list[MoELayer]

    @property
    def expert_counts(self) -> list[int]:
        return [layer.n_experts for layer in self.layers]


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def random_init(config: ModelConfig) -> MoEModel:
    rng = np.random.default_rng(config.seed)
    d, f = config.d_model, config.d_ff
    embedding = rng.normal(0.0, 1.0 / math.sqrt(d), size=(config.vocab_size, d)) * 2.0
    layers = []
    for _ in range(config.n_layers):
        router = rng.normal(0.0, 1.0, size=(config.experts_per_layer, d))
        experts = [
            Expert(
                gate=Dense(rng.normal(0.0, 1.0 / math.sqrt(d), size=(f, d))),
                up=Dense(rng.normal(0.0, 1.0 / math.sqrt(d), size=(f, d))),
                down=Dense(rng.normal(0.0, 0.5 / math.sqrt(f), size=(d, f))),
            )
            for _ in range(config.experts_per_layer)
        ]
        layers.append(MoELayer(router=router, experts=experts))
    return MoEModel(config=config, embedding=embedding, layers=layers)


MaskLike = Union[None, Mapping[int, Iterable[int]], Sequence[Iterable[int]]]


def normalize_mask(mask: MaskLike, n_layers: int) -> dict[int, frozenset[int]]:
    if mask is None:
        return {}
    items = mask.items() if isinstance(mask, Mapping) else enumerate(mask)
    out = {}
    for i, removed in items:
        i = int(i)
        if not 0 <= i < n_layers:
            raise RoutingError(f"mask refers to layer {i} of {n_layers}")
        s = frozenset(int(j) for j in removed)
        if s:
            out[i] = s
    return out


def prefix_mean(h: np.ndarray) -> np.ndarray:
    """Causal mean over positions along axis -2."""
    t = np.arange(1, h.shape[-2] + 1, dtype=np.float64)[:, None]
    return np.cumsum(h, axis=-2) / t


def prefix_mean_adjoint(g: np.ndarray) -> np.ndarray:
    t = np.arange(1, g.shape[-2] + 1, dtype=np.float64)[:, None]
    scaled = g / t
    return np.flip(np.cumsum(np.flip(scaled, axis=-2), axis=-2), axis=-2)


@dataclass
class LayerCache:
    """Intermediates of one layer's forward pass, flattened over tokens."""

    mix: np.ndarray  # N x d
    live: list[int]
    router: np.ndarray  # live rows
    selected: np.ndarray  # N x k, positions into ``live``
    weights: np.ndarray  # N x k
    dispatch: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)
    # (live position, token rows, slot column), one entry per expert with tokens


def live_experts(n_experts: int, removed: frozenset[int], top_k: int, layer: int) -> list[int]:
    bad = [j for j in removed if not 0 <= j < n_experts]
    if bad:
        raise RoutingError(f"layer {layer}: mask names dead expert indices {sorted(bad)}")
    live = [j for j in range(n_experts) if j not in removed]
    if len(live) < top_k:
        raise RoutingError(
            f"layer {layer}: {len(live)} live experts remain but top_k is {top_k}"
        )
    return live


def route(mix: np.ndarray, router: np.ndarray, top_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k expert positions and renormalized softmax weights per row of ``mix``."""
    logits = mix @ router.T
    order = np.argsort(-logits, axis=1, kind="stable")[:, :top_k]
    kept = np.take_along_axis(logits, order, axis=1)
    e = np.exp(kept - kept[:, :1])
    return order, e / e.sum(axis=1, keepdims=True)


def layer_forward(
    layer: MoELayer,
    h: np.ndarray,
    top_k: int,
    removed: frozenset[int] = frozenset(),
    layer_index: int = 0,
    cache: bool = False,
):
    """Apply one MoE layer to ``h`` of shape (..., T, d_model)."""
    live = live_experts(layer.n_experts, removed, top_k, layer_index)
    router = layer.router if not removed else layer.router[live]
    lead = h.shape[:-1]
    mix = prefix_mean(h).reshape(-1, h.shape[-1])
    selected, weights = route(mix, router, top_k)
    moe = np.zeros_like(mix)
    rec = LayerCache(mix=mix, live=live, router=router, selected=selected, weights=weights)
    for pos, j in enumerate(live):
        rows, col = np.nonzero(selected == pos)
        if rows.size == 0:
            continue
        # Inference evaluates the expert on every token so each row sees the same
        # kernel shapes, keeping outputs bit-stable when other tokens' routing
        # changes. The training tape only needs values, so it takes the cheap path.
        y = layer.experts[j](mix[rows]) if cache else layer.experts[j](mix)[rows]
        moe[rows] += weights[rows, col][:, None] * y
        if cache:
            rec.dispatch.append((pos, rows, col))
    out = (mix + moe).reshape(*lead, h.shape[-1])
    return (out, rec) if cache else out


def embed(model: MoEModel, tokens: np.ndarray) -> np.ndarray:
    return model.embedding[np.asarray(tokens)]


def forward(model: MoEModel, tokens, mask: MaskLike = None):
    """Logits and the hidden state after every layer.

    ``tokens`` is (T,) or (n, T); outputs keep the same leading shape.
    """
    tokens = np.asarray(tokens)
    masks = normalize_mask(mask, len(model.layers))
    h = embed(model, tokens)
    hiddens = []
    for i, layer in enumerate(model.layers):
        h = layer_forward(layer, h, model.config.top_k, masks.get(i, frozenset()), i)
        hiddens.append(h)
    return h @ model.embedding.T, hiddens


def run_layers(model: MoEModel, h: np.ndarray, start: int, stop: int, mask: MaskLike = None) -> np.ndarray:
    """Propagate hidden state ``h`` (input of layer ``start``) through layers [start, stop)."""
    masks = normalize_mask(mask, len(model.layers))
    for i in range(start, stop):
        h = layer_forward(model.layers[i], h, model.config.top_k, masks.get(i, frozenset()), i)
    return h


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_nll(logits: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Next-token negative log-likelihood, shape (n, T-1)."""
    lp = log_softmax(logits[..., :-1, :])
    return -np.take_along_axis(lp, tokens[..., 1:, None], axis=-1)[..., 0]


def sequence_losses(model: MoEModel, sequences, mask: MaskLike = None) -> np.ndarray:
    seqs = np.atleast_2d(np.asarray(sequences))
    logits, _ = forward(model, seqs, mask)
    return token_nll(logits, seqs).mean(axis=1)


def lm_loss(model: MoEModel, calib, mask: MaskLike = None) -> float:
    """Mean next-token cross-entropy over every predicted position."""
    seqs = calib.sequences if hasattr(calib, "sequences") else np.atleast_2d(np.asarray(calib))
    if seqs.shape[0] == 0:
        raise ValueError("calibration set is empty")
    logits, _ = forward(model, seqs, mask)
    return float(token_nll(logits, seqs).mean())


def expert_param_count(model: MoEModel) -> int:
    return sum(e.n_params() for layer in model.layers for e in layer.experts)


def total_param_count(model: MoEModel) -> int:
    routers = sum(layer.router.size for layer in model.layers)
    return int(model.embedding.size + routers + expert_param_count(model))


def adapter_param_count(model: MoEModel) -> int:
    return sum(ad.n_params() for layer in model.layers for e in layer.experts for ad in e.adapters.values())


def copy_model(model: MoEModel) -> MoEModel:
    def cw(w: Weight) -> Weight:
        return Dense(w.w.copy()) if isinstance(w, Dense) else Factored(w.a.copy(), w.b.copy())

    layers = [
        MoELayer(
            router=layer.router.copy(),
            experts=[
                Expert(
                    gate=cw(e.gate),
                    up=cw(e.up),
                    down=cw(e.down),
                    adapters={k: replace(ad, a=ad.a.copy(), b=ad.b.copy()) for k, ad in e.adapters.items()},
                )
                for e in layer.experts
            ],
        )
        for layer in model.layers
    ]
    return MoEModel(config=model.config, embedding=model.embedding.copy(), layers=layers)
