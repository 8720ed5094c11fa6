"""MMW estimates, dictionary recovery and the implicit sparsifier."""

import math

import numpy as np
import pytest
import scipy.linalg

from forster.api.schemas import ComputeMode
from forster.core.errors import PrerequisiteViolated
from forster.core.operators import CountingOperator, block_apply, generalized_extremes_dense
from forster.core.random import make_rng
from forster.data import fixtures
from forster.modules.gridhash import PointCloud
from forster.modules.packing import PackingResult, operator_norm
from forster.modules.soc import DenseEdgeWeights, EdgeCombination
from forster.modules.sparsifier import (
    ImplicitLaplacianOracle,
    MmwExponent,
    inv_sqrt_access,
    mmw_embed,
    oracle_mdr,
    packing_bounds,
    sparsify_implicit,
    trace_exp_estimate,
    trace_pyp_estimate,
    truncation_guard,
    weight_ratio,
)


def _projector(n):
    return np.eye(n) - np.full((n, n), 1.0 / n)


def _random_psd(rng, n, scale):
    B = rng.standard_normal((n, n))
    return scale * B @ B.T / n


def exact_packing_oracle(instance, delta, rng, settings):
    """The masked support scaled to feasibility; exact ratio 1 for these tests."""
    c = instance.support()
    lam = operator_norm(instance, c, rng)
    x = EdgeCombination(instance.n, ((1.0 / lam, c),))
    return PackingResult(x=x, value=1.0 / lam, q_run=1.0, upper_certificate=1.0 / lam,
                         phases=0, decisions=[])


class TestOracle:
    def test_wraps_sources(self, path6):
        for source in (path6, path6.to_csr(), path6.dense()):
            oracle = ImplicitLaplacianOracle.of(source)
            assert oracle.n == 6
            assert np.allclose(oracle.apply(np.eye(6)), path6.dense())

    def test_check_rejects_non_laplacian(self, rng):
        ImplicitLaplacianOracle.of(fixtures.path_laplacian(5)).check(rng)
        with pytest.raises(PrerequisiteViolated):
            ImplicitLaplacianOracle.of(np.eye(4)).check(rng)
        with pytest.raises(PrerequisiteViolated):
            ImplicitLaplacianOracle.of([[1.0]])


class TestEstimates:
    def test_trace_of_zero_exponent(self, rng):
        assert trace_exp_estimate(MmwExponent.zero(7), 0.1, rng) == pytest.approx(7.0)

    def test_sketched_trace_close_to_exact(self, rng):
        dense = MmwExponent.of_dense(_random_psd(rng, 20, 0.5))
        exact = float(np.sum(np.exp(-scipy.linalg.eigvalsh(dense.dense))))
        sketched = MmwExponent(n=20, apply=dense.apply, bound=dense.bound)
        estimate = trace_exp_estimate(sketched, 0.01, rng)
        assert 0.8 * exact <= estimate <= 1.1 * exact

    def test_trace_pyp_identity_and_scaling(self, rng):
        n = 5
        S = MmwExponent.of_dense(_random_psd(rng, n, 1.0))
        P = np.eye(n)
        assert trace_pyp_estimate(lambda V: V, S, 0.1, rng, P) == pytest.approx(1.0)
        assert trace_pyp_estimate(lambda V: 2.0 * V, S, 0.1, rng, 2.0 * P) == pytest.approx(4.0)

    def test_exact_embedding_of_zero_exponent(self, rng):
        n = 6
        points = mmw_embed(lambda V: V, MmwExponent.zero(n), 0.1, rng, _projector(n))
        d = points.squared_distances()
        off = ~np.eye(n, dtype=bool)
        assert np.allclose(d[off], 2.0 / n)

    def test_sketched_embedding_scale(self, rng, fast_settings):
        n = 120
        P = _projector(n)
        points = mmw_embed(lambda V: P @ V, MmwExponent.zero(n), 0.1, rng, P, fast_settings)
        assert points.k < n
        iu = np.triu_indices(n, 1)
        ratio = points.squared_distances()[iu] / (2.0 / n)
        assert 0.6 <= ratio.mean() <= 0.9


class TestGuards:
    def test_truncation_guard(self):
        points = PointCloud(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]]))
        guard = truncation_guard(points, 0.5, 2.0)
        assert guard.alpha == pytest.approx((40.0 / 9.0) * 2.0 * 3**4 * 2**2)
        assert guard.gamma == pytest.approx(9.0)
        assert truncation_guard(points, 20.0, 2.0).gamma == 20.0

    def test_truncation_guard_arguments(self):
        points = PointCloud(np.zeros((2, 1)))
        with pytest.raises(PrerequisiteViolated):
            truncation_guard(points, 1.0, 0.5)
        with pytest.raises(PrerequisiteViolated):
            truncation_guard(points, 0.0, 2.0)

    def test_bounds(self):
        lower, upper = packing_bounds(4, 6.0, 0.5)
        assert lower == pytest.approx(0.5 * 0.5 / 4)
        assert upper == pytest.approx((6.0 + 4 * 0.5) / 2.0)
        assert weight_ratio(4, 6.0, 0.5) == pytest.approx(1.0 + 24.0)


class TestInvSqrt:
    def test_dense_projector(self, rng):
        n = 5
        Pi = _projector(n)
        x_bar = DenseEdgeWeights(np.full((n, n), 1.0 / n) - np.eye(n) / n)
        access = inv_sqrt_access(x_bar, lambda V: 2.0 * Pi @ V, 1.0, 1.0, 0.1, rng, B_dense=2.0 * Pi)
        v = Pi @ rng.standard_normal(n)
        assert np.allclose(access.apply(v), 2.0**0.25 / math.sqrt(2.0) * v)

    def test_quadrature_matches_dense(self, rng, path6):
        n, reg = 6, 0.5
        Pi = _projector(n)
        B = path6.dense() + reg * Pi
        W = np.diag(np.diag(B)) - B
        access = inv_sqrt_access(DenseEdgeWeights(W), lambda V: B @ V, reg, 1.0, 0.1, rng)
        exact = inv_sqrt_access(DenseEdgeWeights(W), lambda V: B @ V, reg, 1.0, 0.1, rng, B_dense=B)
        V = Pi @ rng.standard_normal((n, 3))
        approx = access.apply(V)
        assert np.linalg.norm(approx - exact.apply(V)) <= 2e-2 * np.linalg.norm(exact.apply(V))
        assert access.nodes > 0 and access.pcg_iterations > 0

    def test_columns_cached_after_n(self, rng, path6):
        n, reg = 6, 0.5
        B = path6.dense() + reg * _projector(n)
        W = np.diag(np.diag(B)) - B
        counting = CountingOperator(n, lambda V: B @ V)
        access = inv_sqrt_access(DenseEdgeWeights(W), block_apply(counting), reg, 1.0, 0.1, rng)
        V = _projector(n) @ rng.standard_normal((n, 4))
        first = access.apply(V)
        assert access.dense is None and access.columns == 4
        access.apply(rng.standard_normal((n, 20)))
        assert access.dense is not None and access.columns == 4 + n
        spent = counting.queries
        again = access.apply(V)
        assert counting.queries == spent
        assert np.linalg.norm(again - first) <= 1e-4 * np.linalg.norm(first)


@pytest.mark.slow
class TestRecovery:
    def test_mdr_star(self, rng, fast_settings, star8):
        settings = fast_settings.with_overrides({"MDR_MAX_ROUNDS": 40})
        n, reg = 8, 0.1
        L = star8.dense() + reg * _projector(n)
        P = 2.0**0.25 * scipy.linalg.fractional_matrix_power(L + np.full((n, n), 1.0 / n), -0.5).real
        P = P @ _projector(n)
        trace = float(np.trace(star8.dense()))
        result = oracle_mdr(
            n, lambda V: P @ V, weight_ratio(n, trace, reg), packing_bounds(n, trace, reg),
            0.1, rng, L_dense=L, P_dense=P,
            packing_oracle=exact_packing_oracle, settings=settings,
        )
        lo, hi = generalized_extremes_dense(result.x_bar.matvec(np.eye(n)), L)
        assert hi == pytest.approx(1.0, rel=1e-6)
        assert lo == pytest.approx(1.0 / result.factor, rel=1e-6)
        assert 1 <= result.rounds <= 40
        assert len(result.state.gains) == result.rounds

    def test_mdr_star_measured_through_p(self, rng, fast_settings, star8):
        settings = fast_settings.with_overrides({"MDR_MAX_ROUNDS": 12})
        n, reg = 8, 0.1
        L = star8.dense() + reg * _projector(n)
        P = 2.0**0.25 * scipy.linalg.fractional_matrix_power(L + np.full((n, n), 1.0 / n), -0.5).real
        P = P @ _projector(n)
        trace = float(np.trace(star8.dense()))
        result = oracle_mdr(
            n, lambda V: P @ V, weight_ratio(n, trace, reg), packing_bounds(n, trace, reg),
            0.1, rng, packing_oracle=exact_packing_oracle, settings=settings,
        )
        lo, hi = generalized_extremes_dense(result.x_bar.matvec(np.eye(n)), L)
        assert hi <= 1.0 + 1e-9
        assert lo >= (1.0 - 1e-9) / result.factor
        assert result.state.gains == []

    def test_mmw_regret_and_gain_floor(self, rng, fast_settings, star8):
        settings = fast_settings.with_overrides(
            {"MDR_MAX_ROUNDS": 16, "MDR_CHECK_EVERY": 1000, "MDR_ORACLE_CALLS": 2}
        )
        n, reg = 8, 0.1
        L = star8.dense() + reg * _projector(n)
        P = 2.0**0.25 * scipy.linalg.fractional_matrix_power(L + np.full((n, n), 1.0 / n), -0.5).real
        P = P @ _projector(n)
        trace = float(np.trace(star8.dense()))
        result = oracle_mdr(
            n, lambda V: P @ V, weight_ratio(n, trace, reg), packing_bounds(n, trace, reg),
            0.1, rng, L_dense=L, P_dense=P,
            packing_oracle=exact_packing_oracle, settings=settings,
        )
        state, eta = result.state, settings.MDR_ETA
        assert state.rounds == 16
        gains, norms = np.array(state.gains), np.array(state.gain_norms)
        floors = np.array(state.gain_floors)

        complement = scipy.linalg.null_space(np.ones((1, n)))
        G_sum = P @ state.x_sum.matvec(P)
        lam_min = scipy.linalg.eigvalsh(complement.T @ G_sum @ complement)[0]
        bound = gains.sum() - 0.5 * eta * np.sum(norms * gains) - math.log(n) / eta
        assert lam_min >= bound - 1e-9 * max(1.0, abs(bound))

        assert floors.shape == gains.shape
        assert np.all(gains >= floors * (1.0 - 1e-9) - 1e-12)
        assert floors.max() > 0.0

    def test_sparsify_path(self, rng, fast_settings, path6):
        settings = fast_settings.with_overrides({"MDR_MAX_ROUNDS": 30})
        reg = 0.25
        L_tilde, report = sparsify_implicit(path6, reg, 0.1, rng, settings)
        B = path6.dense() + reg * _projector(6)
        lo, hi = generalized_extremes_dense(L_tilde.dense(), B)
        assert lo >= 1.0 - 1e-9
        assert hi <= report.f_total * (1.0 + 1e-9)
        assert report.phases_run == 1 and report.queries >= 6
        assert report.nnz == L_tilde.nnz <= 15

    def test_sparsify_sketched_path(self, settings):
        tuned = settings.with_overrides({"MDR_MAX_ROUNDS": 30, "MDR_ORACLE_CALLS": 1, "PACKING_MAX_TERMS": 16})
        path8, reg = fixtures.path_laplacian(8), 0.1
        L_tilde, report = sparsify_implicit(path8, reg, 0.1, make_rng(1), tuned, mode=ComputeMode.SKETCHED)
        lo, hi = generalized_extremes_dense(L_tilde.dense(), path8.dense() + reg * _projector(8))
        assert report.mode == ComputeMode.SKETCHED
        assert report.phases_run == report.phases_planned >= 2
        assert lo >= 1.0 - 1e-8
        assert hi <= report.f_total * (1.0 + 1e-8)
        assert math.isfinite(report.f_total)
        assert sum(phase.queries for phase in report.phases) <= report.queries <= tuned.SPARSIFY_QUERY_BUDGET


class TestArguments:
    def test_regularization_out_of_range(self, rng, path6):
        with pytest.raises(PrerequisiteViolated):
            sparsify_implicit(path6, 100.0, 0.1, rng)
        with pytest.raises(PrerequisiteViolated):
            sparsify_implicit(path6, 0.5, 1.5, rng)
