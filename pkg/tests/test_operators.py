"""Matvec-only kernels against dense references."""

import math

import numpy as np
import pytest
import scipy.linalg
from scipy.sparse.linalg import aslinearoperator

from forster.core.errors import PolynomialDegreeExceeded, QueryBudgetExceeded
from forster.core.operators import (
    CountingOperator,
    block_apply,
    block_pcg,
    center,
    exp_half_polynomial,
    generalized_extremes_dense,
    hutchinson_trace,
    inv_sqrt_quadrature_nodes,
    lambda_max,
    materialize,
    probe_count,
)


def _spd(rng, n):
    G = rng.standard_normal((n, n))
    return G @ G.T / n + np.eye(n)


def test_center_removes_mean():
    v = np.array([1.0, 2.0, 6.0])
    assert np.allclose(center(v), [-2.0, -1.0, 3.0])
    assert np.allclose(center(np.ones((4, 2))), 0.0)


def test_counting_operator_counts_columns(rng):
    M = _spd(rng, 5)
    op = CountingOperator(5, lambda V: M @ V)
    apply = block_apply(op)
    apply(np.ones(5))
    apply(np.ones((5, 3)))
    assert op.queries == 4


def test_counting_operator_budget(rng):
    op = CountingOperator(4, lambda V: V, budget=3)
    with pytest.raises(QueryBudgetExceeded):
        block_apply(op)(np.ones((4, 4)))


def test_materialize(rng):
    M = _spd(rng, 6)
    assert np.allclose(materialize(aslinearoperator(M)), M)


def test_probe_count_floor():
    assert probe_count(2, 0.5, 0.1) == 8
    assert probe_count(100, 0.01, 2.0) == math.ceil(2.0 * math.log(1e4))


def test_hutchinson_trace_close(rng):
    M = _spd(rng, 30)
    estimate = hutchinson_trace(lambda V: M @ V, 30, 400, rng)
    assert estimate == pytest.approx(np.trace(M), rel=0.1)


def test_exp_half_polynomial_dominates(rng):
    poly = exp_half_polynomial(6.0, tol=0.05)
    x = np.linspace(0.0, 6.0, 4096)
    values = poly.apply(lambda V: x[:, None] * V, np.ones((4096, 1)))[:, 0]
    target = np.exp(-x / 2.0)
    assert np.all(values >= target * (1.0 - 1e-12))
    assert np.all(values * 0.95 <= target * (1.0 + 1e-12))


def test_exp_half_polynomial_degree_cap(settings):
    capped = settings.with_overrides({"CHEBYSHEV_MAX_DEGREE": 4})
    with pytest.raises(PolynomialDegreeExceeded):
        exp_half_polynomial(100.0, capped)


def test_block_pcg_solves(rng):
    M = _spd(rng, 12)
    B = rng.standard_normal((12, 3))
    X, iterations = block_pcg(lambda V: M @ V, B, lambda V: V, 1e-10, 200)
    assert np.allclose(M @ X, B, atol=1e-8)
    assert iterations >= 1


def test_inv_sqrt_quadrature(rng):
    M = _spd(rng, 8)
    eigvals = scipy.linalg.eigvalsh(M)
    shifts, weights = inv_sqrt_quadrature_nodes(eigvals[0], eigvals[-1], 0.25, 1e-4)
    approx = sum(w * np.linalg.inv(M + s * np.eye(8)) for s, w in zip(shifts, weights))
    exact = scipy.linalg.fractional_matrix_power(M, -0.5).real
    assert np.linalg.norm(approx - exact, 2) <= 1e-2 * np.linalg.norm(exact, 2)


def test_lambda_max(rng):
    M = _spd(rng, 10)
    assert lambda_max(aslinearoperator(M), rng) == pytest.approx(scipy.linalg.eigvalsh(M)[-1])


def test_generalized_extremes_dense_identity_pencil():
    n = 5
    L = n * np.eye(n) - np.ones((n, n))
    lo, hi = generalized_extremes_dense(2.0 * L, L)
    assert lo == pytest.approx(2.0)
    assert hi == pytest.approx(2.0)
