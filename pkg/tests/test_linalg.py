"""Dense linear algebra: leverage scores, Gram matrices, inverse square roots, RIP checks."""

import math

import numpy as np
import pytest

from forster.core.errors import DegenerateRow, IllConditioned, InvalidDataset, Overflow, RankDeficient
from forster.core.linalg import (
    Dataset,
    inv_sqrt,
    leverage_scores,
    log_det_spd,
    scaled_gram,
    scaled_leverage_scores,
    transformed_rows,
    verify_rip,
)


class TestDataset:
    def test_default_marginals(self):
        dataset = Dataset.from_arrays(np.eye(3)[[0, 1, 2, 0]] + 0.0)
        assert np.allclose(dataset.c, 0.75)
        assert dataset.c_min == pytest.approx(0.75)

    def test_rejects_wrong_sum(self):
        with pytest.raises(InvalidDataset):
            Dataset.from_arrays(np.eye(2), np.array([0.5, 0.5]))

    def test_rejects_zero_row(self):
        with pytest.raises(InvalidDataset):
            Dataset.from_arrays(np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]))

    def test_rejects_short_matrix(self):
        with pytest.raises(InvalidDataset):
            Dataset.from_arrays(np.ones((1, 2)))

    def test_arrays_are_frozen(self, three_row):
        dataset = Dataset.from_arrays(*three_row)
        with pytest.raises(ValueError):
            dataset.A[0, 0] = 2.0


class TestLeverageScores:
    def test_orthonormal_rows(self):
        assert np.allclose(leverage_scores(np.eye(3)), 1.0)

    def test_two_thirds(self):
        A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        assert np.allclose(leverage_scores(A), 2.0 / 3.0)

    def test_sum_is_rank(self, rng):
        A = rng.standard_normal((20, 4))
        assert leverage_scores(A).sum() == pytest.approx(4.0)

    def test_rank_deficient(self):
        with pytest.raises(RankDeficient):
            leverage_scores(np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]))

    def test_scaled_scores_are_shift_invariant(self, rng, three_row):
        A, _ = three_row
        t = rng.standard_normal(3)
        assert np.allclose(scaled_leverage_scores(A, t), scaled_leverage_scores(A, t + 50.0))


class TestGram:
    def test_identity(self):
        assert np.allclose(scaled_gram(np.eye(2), np.zeros(2)), np.eye(2))

    def test_three_row(self, three_row):
        A, _ = three_row
        assert np.allclose(scaled_gram(A, np.zeros(3)), [[1.5, 0.5], [0.5, 1.5]])

    def test_shift_scales(self, rng, three_row):
        A, _ = three_row
        t = rng.standard_normal(3)
        assert np.allclose(scaled_gram(A, t + 0.7), math.exp(0.7) * scaled_gram(A, t))

    def test_overflow(self, three_row):
        A, _ = three_row
        with pytest.raises(Overflow):
            scaled_gram(A, np.array([1000.0, 0.0, 0.0]))

    def test_log_det(self, three_row):
        A, _ = three_row
        assert log_det_spd(scaled_gram(A, np.zeros(3))) == pytest.approx(math.log(2.0))


class TestInvSqrt:
    def test_diagonal(self):
        assert np.allclose(inv_sqrt(np.diag([4.0, 9.0])), np.diag([0.5, 1.0 / 3.0]))

    def test_random_spd(self, rng):
        G = rng.standard_normal((5, 5))
        M = G @ G.T + 0.5 * np.eye(5)
        R = inv_sqrt(M)
        assert np.linalg.norm(R @ M @ R - np.eye(5), 2) <= 1e-8

    def test_ill_conditioned(self):
        with pytest.raises(IllConditioned):
            inv_sqrt(np.diag([1.0, 1e-17]))


class TestVerifyRip:
    def test_identity_passes(self):
        certificate = verify_rip(np.eye(3), np.ones(3), np.eye(3), 1e-6)
        assert certificate.passed
        assert certificate.eig_min == pytest.approx(1.0)
        assert certificate.eig_max == pytest.approx(1.0)

    def test_three_row_fails_without_transform(self, three_row):
        A, c = three_row
        certificate = verify_rip(A, c, np.eye(2), 0.1)
        assert not certificate.passed
        assert certificate.eig_min == pytest.approx(2.0 / 3.0)
        assert certificate.eig_max == pytest.approx(4.0 / 3.0)

    def test_alias_in_json(self):
        certificate = verify_rip(np.eye(2), np.ones(2), np.eye(2), 0.1)
        assert certificate.model_dump(by_alias=True)["pass"] is True

    def test_degenerate_row(self):
        A = np.array([[1.0, 0.0], [0.0, 1.0]])
        R = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(DegenerateRow) as info:
            transformed_rows(A, R)
        assert info.value.index == 1
