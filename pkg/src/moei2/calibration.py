"""Seeded synthetic corpus: sequences drawn from a fixed order-1 Markov chain."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig


def transition_matrix(
    vocab_size: int, chain_seed: int = 0, concentration: float = 0.5, stay: float = 0.97, cluster_size: int = 8
) -> np.ndarray:
    """Row-stochastic matrix of the synthetic language.

    Tokens are partitioned into topic clusters of ``cluster_size``; a token
    moves within its cluster with probability ``stay`` (Dirichlet row around a
    Zipf-like base measure) and otherwise to a uniformly random outside token.
    A single cluster degenerates to plain Dirichlet rows.
    """
    rng = np.random.default_rng([chain_seed, vocab_size, 0x6D61726B])
    perm = rng.permutation(vocab_size)
    n_clusters = max(1, vocab_size // cluster_size)
    members = np.array_split(perm, n_clusters)
    trans = np.zeros((vocab_size, vocab_size))
    for group in members:
        base = 1.0 / np.arange(1, len(group) + 1)
        base = base / base.sum()
        alpha = np.maximum(concentration * len(group) * base, 1e-3)
        inside = rng.dirichlet(alpha, size=len(group))
        outside = np.setdiff1d(np.arange(vocab_size), group)
        p_in = stay if outside.size else 1.0
        for row, tok in enumerate(group):
            trans[tok, group] = p_in * inside[row]
            if outside.size:
                trans[tok, outside] = (1.0 - p_in) / outside.size
    return trans / trans.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class CalibrationSet:
    sequences: np.ndarray  # (n, seq_len) int64
    seed: int
    vocab_size: int
    chain_seed: int = 0
    generator_order: int = 1

    def __len__(self) -> int:
        return int(self.sequences.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.sequences.shape[1])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.sequences, dtype="<i8").tobytes())
        h.update(repr((self.sequences.shape, self.seed, self.vocab_size, self.chain_seed)).encode())
        return h.hexdigest()[:16]

    def batches(self, batch_size: int) -> list[np.ndarray]:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        n = len(self)
        return [self.sequences[i : i + batch_size] for i in range(0, n, batch_size)]

    def subset(self, idx) -> "CalibrationSet":
        return CalibrationSet(self.sequences[np.asarray(idx)], self.seed, self.vocab_size, self.chain_seed)


def make_calibration(
    config: ModelConfig, n_sequences: int, seq_len: int, seed: int, chain_seed: int = 0
) -> CalibrationSet:
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    if n_sequences < 0:
        raise ValueError("n_sequences must be >= 0")
    v = config.vocab_size
    trans = transition_matrix(v, chain_seed)
    cdf = np.cumsum(trans, axis=1)
    cdf[:, -1] = 1.0
    rng = np.random.default_rng(seed)
    seqs = np.empty((n_sequences, seq_len), dtype=np.int64)
    if n_sequences:
        seqs[:, 0] = rng.integers(0, v, size=n_sequences)
        u = rng.random((n_sequences, seq_len - 1))
        for t in range(1, seq_len):
            rows = cdf[seqs[:, t - 1]]
            seqs[:, t] = (rows < u[:, t - 1 : t]).sum(axis=1)
    return CalibrationSet(sequences=seqs, seed=seed, vocab_size=v, chain_seed=chain_seed)
