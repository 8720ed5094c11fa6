"""Grid and interval rounding into SOC / ASOC families."""

import math

import numpy as np
import pytest

from forster.core.errors import PrerequisiteViolated
from forster.core.random import make_rng
from forster.modules.gridhash import (
    AsocFamily,
    PointCloud,
    asoc_approximation,
    asoc_approximation_1d,
    grid_partition,
    interval_partition_1d,
    scale_ladder,
    soc_approximation,
)
from forster.modules.soc import materialize_dense


class TestGrid:
    def test_identical_points_share_a_cell(self, rng):
        cloud = PointCloud.of(np.tile([0.3, -1.2], (5, 1)))
        assert grid_partition(cloud, 0.5, rng).num_pieces == 1

    @pytest.mark.parametrize("seed", range(20))
    def test_far_pairs_never_share(self, seed):
        rng = np.random.default_rng(seed)
        cloud = PointCloud(rng.uniform(-10.0, 10.0, size=(40, 3)))
        family = soc_approximation(cloud, 1.0, 0.1, make_rng(seed))
        g = cloud.squared_distances()
        x = family.dense_values()
        assert np.all(x[g > family.gamma] == 0.0)

    def test_identical_pair_gets_alpha(self, rng):
        cloud = PointCloud.of(np.zeros((2, 2)))
        family = soc_approximation(cloud, 2.0, 0.1, rng)
        assert family.m == math.ceil(2.0 * math.log2(2 / 0.1))
        assert family.dense_values()[0, 1] == pytest.approx(2.0 * family.m)
        assert family.alpha == pytest.approx(2.0 * family.m)

    def test_close_pairs_covered(self, rng):
        cloud = PointCloud(rng.uniform(0.0, 0.7, size=(30, 2)))
        family = soc_approximation(cloud, 1.0, 0.01, rng)
        x = family.dense_values()
        off = ~np.eye(30, dtype=bool)
        assert np.all(x[off] >= family.beta)

    def test_edge_vector_matches_values(self, rng):
        cloud = PointCloud(rng.standard_normal((12, 2)))
        family = soc_approximation(cloud, 0.5, 0.1, rng)
        vector = family.as_edge_vector()
        assert np.allclose(vector.dense_weights(), family.dense_values())

    def test_bad_arguments(self, rng):
        cloud = PointCloud.of([0.0, 1.0])
        with pytest.raises(PrerequisiteViolated):
            grid_partition(cloud, 0.0, rng)
        with pytest.raises(PrerequisiteViolated):
            soc_approximation(cloud, 1.0, 1.5, rng)
        with pytest.raises(PrerequisiteViolated):
            PointCloud(np.array([[np.nan]]))


class TestIntervals:
    @pytest.mark.parametrize("seed", range(20))
    def test_close_pairs_never_split(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.uniform(0.0, 10.0, size=50)
        black, partition = interval_partition_1d(values, 0.8, make_rng(seed))
        assert np.array_equal(np.flatnonzero(partition.support), black)
        split = partition.support[:, None] & partition.support[None, :] & ~partition.same_piece()
        np.fill_diagonal(split, False)
        gaps = np.abs(values[:, None] - values[None, :])
        assert not np.any(split & (gaps <= 0.8))

    def test_separation_rate(self):
        rng = make_rng(7)
        values = np.array([0.0, 1.75])
        hits = 0
        trials = 4000
        for _ in range(trials):
            _, partition = interval_partition_1d(values, 1.0, rng)
            if partition.num_pieces == 2:
                hits += 1
        assert hits / trials >= 0.25 - 3.0 * math.sqrt(0.25 * 0.75 / trials)

    def test_ladder(self):
        scales = scale_ladder(9.0, 4.0, 1.1)
        assert scales[0] ** 2 == pytest.approx(1.0)
        assert scales[-1] ** 2 >= 9.0 / 4.0
        assert scales[-2] ** 2 < 9.0 / 4.0
        assert np.allclose(scales[1:] / scales[:-1], 1.1)


class TestAsoc:
    def test_equal_values_give_nothing(self, rng):
        family = asoc_approximation_1d(np.full(6, 2.5), 4.0, 1.0, 4.0, 0.1, rng)
        assert family.terms == ()
        assert np.allclose(family.dense_values(), 0.0)

    def test_entrywise_upper_bound(self, rng):
        values = rng.uniform(0.0, 3.0, size=15)
        family = asoc_approximation_1d(values, 4.0, 9.0, 4.0, 0.1, rng)
        g = (values[:, None] - values[None, :]) ** 2
        for index in range(len(family.terms)):
            assert np.all(family.term_values(index) <= family.beta * g + 1e-12)

    def test_covers_long_pairs(self, rng):
        values = rng.uniform(0.0, 4.0, size=20)
        gamma = float(np.ptp(values)) ** 2
        family = asoc_approximation_1d(values, 4.0, gamma, 4.0, 0.01, rng)
        g = (values[:, None] - values[None, :]) ** 2
        long = g >= gamma / 4.0
        assert np.all(family.dense_values()[long] >= g[long])

    def test_multi_coordinate_union(self, rng):
        cloud = PointCloud(rng.uniform(0.0, 1.0, size=(10, 3)))
        family = asoc_approximation(cloud, 4.0, 1.0, 4.0, 0.1, rng)
        assert family.kind == "asoc"
        assert np.allclose(family.as_edge_vector().dense_weights(), family.dense_values())

    def test_gamma_below_spread(self, rng):
        with pytest.raises(PrerequisiteViolated):
            asoc_approximation_1d(np.array([0.0, 5.0]), 4.0, 1.0, 4.0, 0.1, rng)

    def test_sample_matches_materialized(self, rng):
        cloud = PointCloud(rng.uniform(0.0, 2.0, size=(8, 2)))
        family = AsocFamily(cloud, 4.0, 4.0, 4.0, 0.1, base_seed=99)
        full = family.materialize()
        assert full.m == family.m == cloud.k * family.scales.shape[0] * family.trials
        known = {(weight, rep.partition.key) for weight, rep in full.terms}
        draws = family.sample(10, rng)
        assert len(draws) == 10
        for weight, rep in draws:
            assert rep.is_empty() or (weight, rep.partition.key) in known

    def test_sample_estimates_the_family(self, rng):
        cloud = PointCloud(rng.uniform(0.0, 2.0, size=(6, 1)))
        family = AsocFamily(cloud, 4.0, 4.0, 4.0, 0.1, base_seed=5)
        full = family.materialize()
        empty_share = 1.0 - len(full.terms) / family.m
        draws = family.sample(4000, rng)
        assert sum(rep.is_empty() for _, rep in draws) / 4000 == pytest.approx(empty_share, abs=0.05)
        estimate = sum(weight * rep.dense_mask() for weight, rep in draws) * family.m / 4000
        assert estimate.sum() == pytest.approx(full.dense_values().sum(), rel=0.1)

    def test_masked_family_laplacian(self, rng):
        cloud = PointCloud(rng.uniform(0.0, 1.0, size=(9, 1)))
        family = asoc_approximation(cloud, 4.0, 1.0, 4.0, 0.1, rng)
        total = sum(materialize_dense(vector.soc, vector.mask) * coef
                    for coef, vector in family.as_edge_vector().terms)
        W = family.dense_values()
        assert np.allclose(total, np.diag(W.sum(axis=1)) - W)
