import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moei2.errors import BoundsError, FactorizationError, SingularTriangularError
from moei2.numerics import cholesky, frobenius_norm, triangular_solve, truncated_svd


def test_frobenius_examples():
    assert frobenius_norm(np.zeros((3, 3))) == 0.0
    assert frobenius_norm(np.eye(3)) == pytest.approx(math.sqrt(3), abs=1e-15)
    assert frobenius_norm([[3.0, 4.0]]) == 5.0


def test_svd_rank_one_exact():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=5), rng.normal(size=7)
    m = np.outer(a, b)
    res = truncated_svd(m, 1)
    assert frobenius_norm(m - res.reconstruct()) < 1e-10


def test_svd_diagonal_eckart_young():
    res = truncated_svd(np.diag([3.0, 2.0, 1.0]), 2)
    assert frobenius_norm(np.diag([3.0, 2.0, 1.0]) - res.reconstruct()) == pytest.approx(1.0, abs=1e-12)


def test_svd_full_rank_multiply_back():
    m = np.random.default_rng(1).normal(size=(8, 5))
    res = truncated_svd(m, 5)
    back = res.u @ np.diag(res.singular_values) @ res.v.T
    assert np.max(np.abs(back - m)) < 1e-9


@pytest.mark.parametrize("r", [0, 6])
def test_svd_rank_bounds(r):
    with pytest.raises(BoundsError):
        truncated_svd(np.ones((5, 6)), r)


@settings(max_examples=40, deadline=None)
@given(
    m=st.integers(1, 32), n=st.integers(1, 48), seed=st.integers(0, 2**32 - 1), frac=st.floats(0.0, 1.0)
)
def test_svd_properties(m, n, seed, frac):
    a = np.random.default_rng(seed).normal(size=(m, n))
    r = max(1, int(round(frac * min(m, n))))
    res = truncated_svd(a, r)
    s = res.singular_values
    assert np.all(s >= 0) and np.all(np.diff(s) <= 1e-12)
    assert np.allclose(res.u.T @ res.u, np.eye(r), atol=1e-8)
    assert np.allclose(res.v.T @ res.v, np.eye(r), atol=1e-8)
    # discarded spectrum from an eigen-decomposition of the Gram matrix
    eig = np.sort(np.clip(np.linalg.eigvalsh(a.T @ a if n <= m else a @ a.T), 0, None))[::-1]
    discarded = eig[r:].sum()
    err2 = frobenius_norm(a - res.reconstruct()) ** 2
    assert abs(err2 - discarded) <= 1e-8 * max(frobenius_norm(a) ** 2, 1e-300) + 1e-12
    assert np.allclose(s, np.sqrt(eig[:r]), rtol=1e-7, atol=1e-10)


def test_cholesky_examples():
    assert np.array_equal(cholesky(np.eye(3), 0.0), np.eye(3))
    l = cholesky(np.array([[4.0, 2.0], [2.0, 5.0]]), 0.0)
    assert np.allclose(l, [[2.0, 0.0], [1.0, 2.0]], atol=1e-14)
    assert np.allclose(l @ l.T, [[4.0, 2.0], [2.0, 5.0]], rtol=1e-12)
    assert np.allclose(cholesky(np.zeros((2, 2)), 1e-6), np.diag([1e-3, 1e-3]), rtol=1e-12)


def test_cholesky_reports_failing_pivot():
    a = np.diag([1.0, 2.0, -1.0, 4.0])
    with pytest.raises(FactorizationError) as info:
        cholesky(a, 0.0)
    assert info.value.pivot == 2


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_cholesky_round_trip(n, seed):
    rng = np.random.default_rng(seed)
    l = np.tril(rng.normal(size=(n, n)))
    l[np.diag_indices(n)] = np.abs(l[np.diag_indices(n)]) + 0.5
    a = l @ l.T
    got = cholesky(a, 0.0)
    assert np.allclose(np.abs(got), np.abs(l), rtol=1e-8, atol=1e-10)
    assert frobenius_norm(got @ got.T - a) <= 1e-9 * frobenius_norm(a)


def test_triangular_solve_examples():
    b = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(triangular_solve(np.eye(3), b), b)
    x = triangular_solve(np.diag([2.0, 4.0]), np.array([[2.0], [8.0]]), "left")
    assert np.allclose(x, [[1.0], [2.0]])


@pytest.mark.parametrize("side", ["left", "right"])
def test_triangular_solve_residual(side):
    rng = np.random.default_rng(4)
    l = np.tril(rng.normal(size=(6, 6))) + 3 * np.eye(6)
    b = rng.normal(size=(6, 4)) if side == "left" else rng.normal(size=(4, 6))
    x = triangular_solve(l, b, side)
    resid = l @ x - b if side == "left" else x @ l - b
    assert frobenius_norm(resid) < 1e-10 * frobenius_norm(b)


def test_triangular_solve_zero_diagonal():
    with pytest.raises(SingularTriangularError):
        triangular_solve(np.array([[1.0, 0.0], [1.0, 0.0]]), np.ones((2, 1)))
