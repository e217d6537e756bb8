"""Reverse-mode gradients of the toy model.

Top-k selection is piecewise constant in the parameters and treated as fixed;
the softmax over the kept logits, the prefix-mean mixer, the gated expert
MLPs and the tied head are differentiated exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import SLOTS, MaskLike, MoEModel, embed, layer_forward, normalize_mask, prefix_mean_adjoint


@dataclass
class Tape:
    tokens: np.ndarray
    inputs: list  # hidden state entering each layer
    caches: list
    final: np.ndarray
    logits: np.ndarray


@dataclass
class Grads:
    embedding: np.ndarray
    routers: list  # per layer, full router shape
    experts: list  # per layer, per expert: {slot: dL/dW_effective}
    hidden: list | None = None  # dL/d(input of layer i), kept for tests


def forward_tape(model: MoEModel, tokens, mask: MaskLike = None) -> Tape:
    tokens = np.atleast_2d(np.asarray(tokens))
    masks = normalize_mask(mask, len(model.layers))
    h = embed(model, tokens)
    inputs, caches = [], []
    for i, layer in enumerate(model.layers):
        inputs.append(h)
        h, rec = layer_forward(layer, h, model.config.top_k, masks.get(i, frozenset()), i, cache=True)
        caches.append(rec)
    return Tape(tokens=tokens, inputs=inputs, caches=caches, final=h, logits=h @ model.embedding.T)


def backward(model: MoEModel, tape: Tape, dlogits: np.ndarray, keep_hidden: bool = False) -> Grads:
    d = model.config.d_model
    shape = tape.final.shape
    demb = np.tensordot(dlogits, tape.final, axes=(list(range(dlogits.ndim - 1)), list(range(dlogits.ndim - 1))))
    dh = dlogits @ model.embedding
    routers = [None] * len(model.layers)
    experts = [None] * len(model.layers)
    hidden = [None] * len(model.layers) if keep_hidden else None
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        rec = tape.caches[i]
        dout = dh.reshape(-1, d)
        dmix = dout.copy()
        dgate = np.zeros_like(rec.weights)
        layer_grads = [dict() for _ in layer.experts]
        for pos, rows, col in rec.dispatch:
            j = rec.live[pos]
            e = layer.experts[j]
            wg, wu, wd = e.weight("gate"), e.weight("up"), e.weight("down")
            x = rec.mix[rows]
            a1 = x @ wg.T
            a2 = x @ wu.T
            sig = expit(a1)
            s1 = a1 * sig
            z = s1 * a2
            y = z @ wd.T
            g = rec.weights[rows, col][:, None]
            do = dout[rows]
            dgate[rows, col] = np.sum(do * y, axis=1)
            dy = g * do
            dz = dy @ wd
            da1 = dz * a2 * (sig * (1.0 + a1 * (1.0 - sig)))
            da2 = dz * s1
            acc = layer_grads[j]
            acc["down"] = dy.T @ z
            acc["gate"] = da1.T @ x
            acc["up"] = da2.T @ x
            dmix[rows] += da1 @ wg + da2 @ wu
        w = rec.weights
        dkept = w * (dgate - np.sum(w * dgate, axis=1, keepdims=True))
        dlog = np.zeros((dout.shape[0], rec.router.shape[0]))
        np.put_along_axis(dlog, rec.selected, dkept, axis=1)
        dmix += dlog @ rec.router
        dr = np.zeros_like(layer.router)
        dr[rec.live] = dlog.T @ rec.mix
        routers[i] = dr
        for j, acc in enumerate(layer_grads):
            for s in SLOTS:
                if s not in acc:
                    acc[s] = np.zeros(e_shape(layer.experts[j], s))
        experts[i] = layer_grads
        dh = prefix_mean_adjoint(dmix.reshape(shape))
        if keep_hidden:
            hidden[i] = dh
    np.add.at(demb, tape.tokens.reshape(-1), dh.reshape(-1, d))
    return Grads(embedding=demb, routers=routers, experts=experts, hidden=hidden)


def e_shape(expert, slot):
    return expert.slot(slot).shape


def ce_loss_and_grad(logits: np.ndarray, tokens: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean next-token cross-entropy and its gradient w.r.t. ``logits``."""
    z = logits[..., :-1, :]
    m = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - m)
    p = ez / ez.sum(axis=-1, keepdims=True)
    tgt = tokens[..., 1:]
    count = tgt.size
    nll = -np.log(np.take_along_axis(p, tgt[..., None], axis=-1)[..., 0])
    grad = np.zeros_like(logits)
    g = p.copy()
    np.put_along_axis(g, tgt[..., None], np.take_along_axis(g, tgt[..., None], axis=-1) - 1.0, axis=-1)
    grad[..., :-1, :] = g / count
    return float(nll.mean()), grad


def mse_loss_and_grad(student_logits: np.ndarray, teacher_logits: np.ndarray) -> tuple[float, np.ndarray]:
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    diff = student_logits - teacher_logits
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
