"""Dense float64 linear algebra used by the decomposition and search code.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import BoundsError, FactorizationError, SingularTriangularError


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite float64 2-D array (no copy if already one)."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x r, orthonormal columns
    singular_values: np.ndarray  # r, non-increasing
    v: np.ndarray  # n x r, orthonormal columns

    @property
    def rank(self) -> int:
        return self.singular_values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


def frobenius_norm(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def truncated_svd(m, r: int) -> SvdResult:
    """Best rank-``r`` approximation factors of ``m`` (Eckart-Young)."""
    a = as_matrix(m)
    lo = min(a.shape)
    if not 1 <= r <= lo:
        raise BoundsError(f"rank {r} outside [1, {lo}] for shape {a.shape}")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(u=u[:, :r].copy(), singular_values=s[:r].copy(), v=vt[:r].T.copy())


def cholesky(a, damping: float = 0.0) -> np.ndarray:
    """Lower-triangular L with L @ L.T == a + damping * I.

    Raises FactorizationError carrying the 0-based index of the first
    non-positive pivot.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"cholesky needs a square matrix, got {a.shape}")
    if damping < 0:
        raise ValueError("damping must be non-negative")
    work = a + damping * np.eye(a.shape[0])
    c, info = lapack.dpotrf(work, lower=1, clean=1)
    if info > 0:
        raise FactorizationError(info - 1)
    if info < 0:
        raise ValueError(f"illegal argument {-info} to dpotrf")
    return np.ascontiguousarray(c)


def triangular_solve(l, b, side: str = "left") -> np.ndarray:
    """Solve ``l @ x = b`` (side='left') or ``x @ l = b`` (side='right')."""
    l = as_matrix(l, "l")
    b = as_matrix(b, "b")
    if np.any(np.diag(l) == 0.0):
        raise SingularTriangularError("triangular matrix has a zero diagonal entry")
    if side == "left":
        return solve_triangular(l, b, lower=True)
    if side == "right":
        # x l = b  <=>  l^T x^T = b^T
        return solve_triangular(l, b.T, lower=True, trans="T").T
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")
