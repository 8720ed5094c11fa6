"""Barthe's objective and its derivatives."""

import math

import numpy as np
import pytest

from forster.core.linalg import Dataset
from forster.modules.barthe import (
    RegularizedObjective,
    ScalingState,
    gradient,
    hessian_dense,
    hessian_matvec,
    objective,
    regularized_value_grad_hess,
)


def _state(A, c, t):
    return ScalingState.at(Dataset.from_arrays(A, c), t)


def _f(A, c, t):
    return objective(_state(A, c, t))


@pytest.fixture
def random_instance(rng):
    A = rng.standard_normal((15, 4))
    return A, np.full(15, 4 / 15)


class TestObjective:
    def test_identity_is_flat(self, rng):
        for _ in range(3):
            assert _f(np.eye(2), np.ones(2), rng.standard_normal(2)) == pytest.approx(0.0, abs=1e-12)

    def test_three_row_value(self, three_row):
        assert _f(*three_row, np.zeros(3)) == pytest.approx(math.log(2.0))

    def test_shift_invariance(self, rng, random_instance):
        A, c = random_instance
        t = rng.standard_normal(15)
        assert _f(A, c, t + 3.3) == pytest.approx(_f(A, c, t), abs=1e-9)

    def test_transform_undoes_shift(self, rng, three_row):
        t = rng.standard_normal(3)
        a = _state(*three_row, t).transform()
        b = _state(*three_row, t + 2.0).transform()
        assert np.allclose(a, b * math.exp(1.0))


class TestGradient:
    def test_identity_zero(self, rng):
        assert np.allclose(gradient(_state(np.eye(3), np.ones(3), rng.standard_normal(3))), 0.0)

    def test_three_row(self, three_row):
        g = gradient(_state(*three_row, np.zeros(3)))
        assert np.allclose(g, [1.0 / 12.0, 1.0 / 12.0, -1.0 / 6.0])

    def test_sums_to_zero(self, rng, random_instance):
        A, c = random_instance
        assert gradient(_state(A, c, rng.standard_normal(15))).sum() == pytest.approx(0.0, abs=1e-10)

    def test_finite_differences(self, rng, random_instance):
        A, c = random_instance
        t = 0.5 * rng.standard_normal(15)
        g = gradient(_state(A, c, t))
        h = 1e-6
        fd = np.array([(_f(A, c, t + h * e) - _f(A, c, t - h * e)) / (2 * h) for e in np.eye(15)])
        assert np.linalg.norm(fd - g) <= 1e-5 * max(np.linalg.norm(g), 1.0)


class TestHessian:
    def test_orthonormal_rows_give_zero(self):
        assert np.allclose(hessian_dense(_state(np.eye(3), np.ones(3), np.zeros(3))), 0.0)

    def test_is_a_laplacian(self, rng, random_instance):
        A, c = random_instance
        H = hessian_dense(_state(A, c, rng.standard_normal(15)))
        assert np.abs(H.sum(axis=1)).max() <= 1e-9
        off = H - np.diag(np.diag(H))
        assert off.max() <= 1e-12
        assert np.linalg.eigvalsh(H)[0] >= -1e-8

    def test_matches_gradient_differences(self, three_row):
        A, c = three_row
        H = hessian_dense(_state(A, c, np.zeros(3)))
        h = 1e-6
        columns = [
            (gradient(_state(A, c, h * e)) - gradient(_state(A, c, -h * e))) / (2 * h) for e in np.eye(3)
        ]
        assert np.allclose(np.stack(columns, axis=1), H, atol=1e-5)

    @pytest.mark.parametrize("r", [0.1, 0.3, 0.5])
    def test_stable_under_bounded_moves(self, rng, random_instance, r):
        A, c = random_instance
        for _ in range(40):
            t = rng.standard_normal(15)
            moved = t + r * rng.choice([-1.0, 1.0], size=15)
            v = rng.standard_normal(15)
            base = float(v @ hessian_matvec(_state(A, c, moved), v))
            if base < 1e-8:
                continue
            ratio = float(v @ hessian_matvec(_state(A, c, t), v)) / base
            assert math.exp(-2 * r) - 1e-6 <= ratio <= math.exp(2 * r) + 1e-6

    def test_d_smooth_in_max_norm(self, rng, random_instance):
        A, c = random_instance
        for _ in range(20):
            H = hessian_dense(_state(A, c, rng.standard_normal(15)))
            v = rng.uniform(-1.0, 1.0, 15)
            assert float(v @ H @ v) <= 4 * np.abs(v).max() ** 2 + 1e-8

    def test_matvec_ones_is_zero(self, rng, random_instance):
        A, c = random_instance
        state = _state(A, c, rng.standard_normal(15))
        assert np.allclose(hessian_matvec(state, np.ones(15)), 0.0, atol=1e-12)

    def test_matvec_matches_dense(self, rng):
        A = rng.standard_normal((50, 5))
        state = _state(A, np.full(50, 0.1), rng.standard_normal(50))
        H = hessian_dense(state)
        v = rng.standard_normal(50)
        assert np.linalg.norm(hessian_matvec(state, v) - H @ v) <= 1e-10 * np.linalg.norm(H @ v)
        V = rng.standard_normal((50, 3))
        assert np.allclose(hessian_matvec(state, V), H @ V, rtol=1e-10, atol=1e-12)

    def test_first_column(self, three_row):
        state = _state(*three_row, np.zeros(3))
        assert np.allclose(hessian_matvec(state, np.eye(3)[0]), hessian_dense(state)[:, 0])


class TestRegularized:
    def test_lambda(self, three_row):
        reg = RegularizedObjective.for_dataset(Dataset.from_arrays(*three_row), 0.1, math.log(10.0))
        assert reg.lam == pytest.approx(0.01 * (4.0 / 9.0) / (4.0 * math.log(10.0) ** 2))

    def test_constant_shift_costs_nothing(self, three_row):
        reg = RegularizedObjective.for_dataset(Dataset.from_arrays(*three_row), 0.1, 2.0)
        assert reg.penalty(np.full(3, 5.0)) == pytest.approx(0.0, abs=1e-12)

    def test_finite_differences(self, rng, random_instance):
        dataset = Dataset.from_arrays(*random_instance)
        reg = RegularizedObjective.for_dataset(dataset, 0.5, 1.5)
        t = rng.standard_normal(15)
        _, grad, _ = regularized_value_grad_hess(reg, ScalingState.at(dataset, t))
        h = 1e-6

        def F(s):
            return regularized_value_grad_hess(reg, ScalingState.at(dataset, s))[0]

        fd = np.array([(F(t + h * e) - F(t - h * e)) / (2 * h) for e in np.eye(15)])
        assert np.linalg.norm(fd - grad) <= 1e-5 * max(np.linalg.norm(grad), 1.0)

    def test_hessian_vector(self, rng, random_instance):
        dataset = Dataset.from_arrays(*random_instance)
        reg = RegularizedObjective.for_dataset(dataset, 0.5, 1.5)
        state = ScalingState.at(dataset, rng.standard_normal(15))
        v = rng.standard_normal(15)
        _, _, hv = regularized_value_grad_hess(reg, state, v)
        assert np.allclose(hv, reg.hessian_dense(state) @ v, atol=1e-10)
