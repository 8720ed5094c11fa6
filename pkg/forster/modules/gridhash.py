"""
Grid Hashing

Randomized rounding of a point cloud q_1..q_n in R^k into partitions, and the
clique families built from them that approximate the squared-distance edge
vector g_uv = ||q_u - q_v||^2:

- SOC approximation: m shifted grids, weight beta on same-cell pairs
- ASOC approximation: per coordinate, a ladder of interval widths with
  alternately colored intervals, weight beta rho^2 on pairs split across
  black intervals
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from forster.config import Settings, get_settings
from forster.core.errors import PrerequisiteViolated
from forster.core.random import draw_seed, keyed_rng, spawn
from forster.modules.soc import (
    AsocRep,
    EdgeCombination,
    EdgeVector,
    MaskedSoc,
    Partition,
    SocRep,
)

CliqueTerm = Tuple[float, Union[Partition, AsocRep]]


@dataclass(frozen=True)
class PointCloud:
    """Points q_i as the rows of an n x k array."""

    points: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 2:
            raise PrerequisiteViolated(f"expected an n x k array, got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise PrerequisiteViolated("point coordinates must be finite")

    @classmethod
    def of(cls, points) -> "PointCloud":
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        return cls(points=points)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def k(self) -> int:
        return self.points.shape[1]

    def squared_distances(self) -> np.ndarray:
        diff = self.points[:, None, :] - self.points[None, :, :]
        return np.einsum("uvk,uvk->uv", diff, diff)

    def coordinate_excess(self, threshold: float) -> np.ndarray:
        """g^{(>= threshold)}: per-coordinate squared gaps that reach the threshold, summed."""
        diff = (self.points[:, None, :] - self.points[None, :, :]) ** 2
        return np.where(diff >= threshold, diff, 0.0).sum(axis=2)


@dataclass(frozen=True)
class ScaledCliqueFamily:
    """
    Terms g~^(i) = w_i * (clique indicator of a partition) for kind "soc", or
    w_i * (ASOC mask) for kind "asoc", with the approximation parameters.
    """

    kind: str
    n: int
    terms: Tuple[CliqueTerm, ...]
    alpha: float
    beta: float
    gamma: float
    m: int

    def term_values(self, index: int) -> np.ndarray:
        weight, rep = self.terms[index]
        if isinstance(rep, Partition):
            return weight * rep.same_piece()
        return weight * rep.dense_mask()

    def dense_values(self) -> np.ndarray:
        """x = sum_i g~^(i) as an n x n matrix."""
        total = np.zeros((self.n, self.n))
        for index in range(len(self.terms)):
            total += self.term_values(index)
        return total

    def as_edge_vector(self) -> EdgeVector:
        if self.kind == "soc":
            return MaskedSoc(SocRep(self.n, tuple(self.terms)))
        whole = Partition.whole(np.ones(self.n, dtype=bool))
        return EdgeCombination(
            self.n,
            tuple((1.0, MaskedSoc(SocRep(self.n, ((weight, whole),)), mask))
                  for weight, mask in self.terms),
        )


# ==========================================
# GRID ROUNDING
# ==========================================

def grid_partition(points: PointCloud, rho: float, rng: np.random.Generator) -> Partition:
    """Boxes of side rho, uniformly shifted per dimension; same box means same piece."""
    if rho <= 0.0:
        raise PrerequisiteViolated(f"rho must be positive, got {rho}")
    offset = rng.uniform(0.0, rho, size=points.k)
    cells = np.floor((points.points - offset) / rho).astype(np.int64)
    _, inverse = np.unique(cells, axis=0, return_inverse=True)
    return Partition.from_labels(inverse.reshape(-1) + 1)


def soc_approximation(
    points: PointCloud,
    beta: float,
    delta: float,
    rng: np.random.Generator,
    gamma: Optional[float] = None,
    settings: Optional[Settings] = None,
) -> ScaledCliqueFamily:
    """
    m = ceil(2 log2(n / delta)) grid partitions at rho = sqrt(gamma / k).

    Pairs with g <= 1 share a cell in some partition with probability 1 - delta;
    pairs with g > gamma never do.
    """
    settings = settings or get_settings()
    if beta <= 0.0 or not 0.0 < delta < 1.0:
        raise PrerequisiteViolated("need beta > 0 and delta in (0, 1)")
    if gamma is None:
        gamma = settings.GRID_GAMMA_FACTOR * points.k**2
    rho = math.sqrt(gamma / points.k)
    m = int(math.ceil(2.0 * math.log2(max(points.n, 2) / delta)))
    terms = tuple((beta, grid_partition(points, rho, child)) for child in spawn(rng, m))
    return ScaledCliqueFamily(kind="soc", n=points.n, terms=terms,
                              alpha=beta * m, beta=beta, gamma=gamma, m=m)


# ==========================================
# INTERVAL ROUNDING
# ==========================================

def interval_partition_1d(
    values: np.ndarray, rho: float, rng: np.random.Generator
) -> Tuple[np.ndarray, Partition]:
    """
    Alternately colored intervals of width rho with a random offset and a fair
    color flip. Returns the indices in black intervals and the partition of
    them by interval.
    """
    if rho <= 0.0:
        raise PrerequisiteViolated(f"rho must be positive, got {rho}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    offset = rng.uniform(0.0, rho)
    flip = int(rng.integers(0, 2))
    index = np.floor((values - offset) / rho).astype(np.int64)
    black = (index + flip) % 2 == 0
    labels = np.zeros(values.shape[0], dtype=np.int64)
    if black.any():
        _, inverse = np.unique(index[black], return_inverse=True)
        labels[black] = inverse.reshape(-1) + 1
    return np.flatnonzero(black), Partition.from_labels(labels)


def scale_ladder(gamma: float, alpha: float, ratio: float) -> np.ndarray:
    """rho_1^2 = 4 gamma / (9 alpha), growing by `ratio` until rho^2 >= gamma / 4."""
    rho = math.sqrt(4.0 * gamma / (9.0 * alpha))
    scales = [rho]
    while rho**2 < gamma / 4.0:
        rho *= ratio
        scales.append(rho)
    return np.asarray(scales)


class AsocFamily:
    """
    Lazily indexed ASOC terms over (coordinate, scale, trial).

    Term (j, a, i) is rebuilt on demand from its own keyed random stream, so
    materializing all of them and sampling a few give the same terms.
    """

    def __init__(
        self,
        points: PointCloud,
        beta: float,
        gamma: float,
        alpha: float,
        delta: float,
        base_seed: int,
        settings: Optional[Settings] = None,
    ):
        settings = settings or get_settings()
        if beta < 4.0 or alpha < 1.0 or not 0.0 < delta < 1.0:
            raise PrerequisiteViolated("need beta >= 4, alpha >= 1 and delta in (0, 1)")
        spread = float(np.max(np.ptp(points.points, axis=0))) if points.n else 0.0
        if spread**2 > gamma * (1.0 + 1e-12):
            raise PrerequisiteViolated(f"gamma = {gamma:.4g} is below the largest coordinate gap {spread**2:.4g}")
        self.points = points
        self.beta = beta
        self.gamma = gamma
        self.alpha = alpha
        self.delta = delta
        self.base_seed = base_seed
        self.scales = scale_ladder(gamma, alpha, settings.ASOC_LADDER_RATIO)
        coord_delta = delta / points.k
        self.trials = int(math.ceil(settings.ASOC_TRIAL_CONSTANT * math.log(max(points.n, 2) / coord_delta)))

    @property
    def m(self) -> int:
        return self.points.k * self.scales.shape[0] * self.trials

    def index(self, flat: int) -> Tuple[int, int, int]:
        per_coord = self.scales.shape[0] * self.trials
        coord, rest = divmod(int(flat), per_coord)
        scale, trial = divmod(rest, self.trials)
        return coord, scale, trial

    def term(self, coord: int, scale: int, trial: int) -> Tuple[float, AsocRep]:
        rho = float(self.scales[scale])
        rng = keyed_rng(self.base_seed, coord, scale, trial)
        _, partition = interval_partition_1d(self.points.points[:, coord], rho, rng)
        return self.beta * rho**2, AsocRep(partition)

    def materialize(self) -> ScaledCliqueFamily:
        """Every term, with empty masks dropped; m counts all of them."""
        terms = []
        for flat in range(self.m):
            weight, rep = self.term(*self.index(flat))
            if not rep.is_empty():
                terms.append((weight, rep))
        return ScaledCliqueFamily(kind="asoc", n=self.points.n, terms=tuple(terms),
                                  alpha=self.alpha, beta=self.beta, gamma=self.gamma, m=self.m)

    def sample(self, count: int, rng: np.random.Generator) -> List[Tuple[float, AsocRep]]:
        """
        `count` uniform draws over the index set, empty masks included, so
        (m / count) times the sum of the draws estimates the full family.
        """
        return [self.term(*self.index(flat)) for flat in rng.integers(0, self.m, size=count)]


def asoc_approximation_1d(
    values: np.ndarray,
    beta: float,
    gamma: float,
    alpha: float,
    delta: float,
    rng: np.random.Generator,
    settings: Optional[Settings] = None,
) -> ScaledCliqueFamily:
    """ASOC approximation to g_uv = (q_u - q_v)^2 on the line."""
    return asoc_approximation(PointCloud.of(values), beta, gamma, alpha, delta, rng, settings)


def asoc_approximation(
    points: PointCloud,
    beta: float,
    gamma: float,
    alpha: float,
    delta: float,
    rng: np.random.Generator,
    settings: Optional[Settings] = None,
) -> ScaledCliqueFamily:
    """Union of the per-coordinate families, each with failure budget delta / k."""
    family = AsocFamily(points, beta, gamma, alpha, delta, draw_seed(rng), settings)
    return family.materialize()
