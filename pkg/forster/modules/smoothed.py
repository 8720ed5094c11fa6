"""
Smoothed Instances and Conditioning Diagnostics

Gaussian-perturbed matrices A + G, the explicit diameter bound for deep
marginals, a sampling falsifier for deepness, and the harness that measures
||t*||_inf against d log(1/sigma).
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from loguru import logger

from forster.api.schemas import (
    BenchRow,
    BenchSummary,
    DeepnessReport,
    DeepnessWitness,
    ExperimentSpec,
    MarginalKind,
    SubspaceMargin,
)
from forster.config import Settings, get_settings
from forster.core.errors import (
    Infeasible,
    InvalidDataset,
    MarginalTooLarge,
    NotConverged,
    PrerequisiteViolated,
)
from forster.core.random import RngLike, as_generator, keyed_rng
from forster.modules.newton import minimize_barthe


# ==========================================
# INSTANCES
# ==========================================

@dataclass(frozen=True)
class SmoothedInstance:
    """Realized A~ = A + G with G_ij ~ N(0, sigma^2) and its squared row-norm range [mu, M]."""

    base: np.ndarray
    sigma: float
    A: np.ndarray
    mu: float
    M: float
    guard_passed: bool
    resamples: int = 0
    seed: Optional[int] = None

    @property
    def noise(self) -> np.ndarray:
        return self.A - self.base


def random_unit_rows(n: int, d: int, rng: RngLike = None) -> np.ndarray:
    """n rows drawn uniformly from the unit sphere in R^d."""
    rng = as_generator(rng)
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def generate_smoothed(
    base: Union[np.ndarray, Tuple[int, int]],
    sigma: float,
    rng: RngLike = None,
    guard: bool = True,
    settings: Optional[Settings] = None,
) -> SmoothedInstance:
    """
    Perturb unit rows by entrywise Gaussian noise.

    `base` is a matrix with unit rows or an (n, d) shape for random unit rows.
    With the guard on, draws whose squared row norms leave
    [NORM_GUARD_LOW, NORM_GUARD_HIGH] are redrawn up to NORM_GUARD_RESAMPLES
    times; a final violation is kept and flagged.
    """
    settings = settings or get_settings()
    if sigma < 0.0:
        raise PrerequisiteViolated(f"sigma must be nonnegative, got {sigma}")
    seed = rng if isinstance(rng, int) else None
    rng = as_generator(rng)
    if isinstance(base, tuple):
        base = random_unit_rows(base[0], base[1], rng)
    base = np.asarray(base, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(base, axis=1) - 1.0) > 1e-9):
        raise PrerequisiteViolated("base rows must have unit norm")

    resamples = 0
    while True:
        A = base + sigma * rng.standard_normal(base.shape) if sigma > 0.0 else base.copy()
        norms = np.sum(A * A, axis=1)
        passed = bool(np.all((norms >= settings.NORM_GUARD_LOW) & (norms <= settings.NORM_GUARD_HIGH)))
        if passed or not guard or resamples >= settings.NORM_GUARD_RESAMPLES:
            break
        resamples += 1
    if guard and not passed:
        logger.warning("row-norm guard still violated after {} resamples (sigma={})", resamples, sigma)
    return SmoothedInstance(base=base, sigma=sigma, A=A, mu=float(norms.min()), M=float(norms.max()),
                            guard_passed=passed, resamples=resamples, seed=seed)


# ==========================================
# DIAMETER BOUND
# ==========================================

def diameter_bound(mu: float, M: float, eta: float, delta: float, c_min: float, d: int) -> float:
    """1/2 log( M / (mu c_min) * (4 M / (eta Delta^2))^(d-1) ) for (eta, Delta)-deep marginals."""
    if min(mu, M, delta, c_min) <= 0.0 or d < 1:
        raise PrerequisiteViolated("mu, M, Delta and c_min must be positive and d >= 1")
    if not 0.0 < eta <= 1.0:
        raise PrerequisiteViolated(f"eta must lie in (0, 1], got {eta}")
    return 0.5 * (math.log(M / (mu * c_min)) + (d - 1) * math.log(4.0 * M / (eta * delta**2)))


# ==========================================
# DEEPNESS FALSIFIER
# ==========================================

def _subspace_weight(
    A: np.ndarray, c: np.ndarray, basis: np.ndarray, delta: float
) -> Tuple[np.ndarray, float]:
    """Rows within distance Delta of span(basis) and their marginal weight."""
    residual = A - (A @ basis) @ basis.T
    distance = np.linalg.norm(residual, axis=1)
    close = np.flatnonzero(distance <= delta + 1e-12 * max(1.0, float(np.abs(A).max())))
    return close, float(c[close].sum())


def _top_basis(rows: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """(singular values, orthonormal basis of the top-k right singular subspace)."""
    _, s, Vt = scipy.linalg.svd(rows, full_matrices=False)
    return s, Vt[:k].T


def deepness_witness_check(
    A: np.ndarray,
    c: Optional[np.ndarray],
    eta: float,
    delta: float,
    samples: Optional[int] = None,
    rng: RngLike = None,
    settings: Optional[Settings] = None,
) -> DeepnessReport:
    """
    Look for k-dimensional subspaces holding more than (1 - eta) k of the
    marginal mass within distance Delta.

    For each k in [d-1], random subsets of size m = ceil((1 - eta) k n / d) and
    data-driven subsets (the m rows nearest the span of k random rows) are
    tested for sigma_{k+1} <= sqrt(m) Delta. Each hit is re-examined against
    the top-k right singular subspace of the subset (and the seeding span);
    only confirmed violations become witnesses. The verdict never claims
    deepness.
    """
    settings = settings or get_settings()
    rng = as_generator(rng)
    A = np.asarray(A, dtype=np.float64)
    n, d = A.shape
    c = np.full(n, d / n) if c is None else np.asarray(c, dtype=np.float64)
    samples = samples or settings.DEEPNESS_SAMPLES
    per_k: List[SubspaceMargin] = []
    witnesses: List[DeepnessWitness] = []
    checked = 0

    def confirm(k: int, basis: np.ndarray) -> None:
        close, weight = _subspace_weight(A, c, basis, delta)
        limit = (1.0 - eta) * k
        if weight > limit + 1e-12:
            witnesses.append(DeepnessWitness(k=k, rows=close.tolist(), weight=weight, limit=limit))

    for k in range(1, d):
        m = min(n, int(math.ceil((1.0 - eta) * k * n / d)))
        worst = math.inf
        for trial in range(samples):
            if trial % 2 == 0:
                subset = rng.choice(n, size=m, replace=False)
                seed_basis = None
            else:
                seeds = rng.choice(n, size=k, replace=False)
                seed_basis = scipy.linalg.orth(A[seeds].T)
                residual = np.linalg.norm(A - (A @ seed_basis) @ seed_basis.T, axis=1)
                subset = np.argsort(residual, kind="stable")[:m]
            s, basis = _top_basis(A[subset], k)
            sigma_next = float(s[k]) if s.shape[0] > k else 0.0
            margin = sigma_next - math.sqrt(m) * delta
            worst = min(worst, margin)
            checked += 1
            if margin <= 0.0:
                confirm(k, basis)
            if seed_basis is not None and seed_basis.shape[1] == k:
                confirm(k, seed_basis)
        per_k.append(SubspaceMargin(k=k, subset_size=m, worst_margin=worst, samples=samples))

    verdict = "violation found" if witnesses else "no violation found"
    logger.debug("deepness check: {} subsets, {} witnesses", checked, len(witnesses))
    return DeepnessReport(eta=eta, delta=delta, per_k=per_k, subsets_checked=checked,
                          witnesses=witnesses, verdict=verdict)


# ==========================================
# MARGINALS
# ==========================================

def nonuniform_guard(c: Sequence[float], n: int, d: int, c_const: Optional[float] = None,
                     settings: Optional[Settings] = None) -> float:
    """Check c <= c_const (d / n) entrywise; returns max_i c_i n / d."""
    settings = settings or get_settings()
    c_const = settings.MARGINAL_CONST if c_const is None else c_const
    c = np.asarray(c, dtype=np.float64)
    ratio = c * n / d
    worst = int(np.argmax(ratio))
    if ratio[worst] > c_const * (1.0 + 1e-12):
        raise MarginalTooLarge(
            f"marginal {worst} is {ratio[worst]:.4g} x d/n, above the cap {c_const:.4g}", worst
        )
    return float(ratio[worst])


def dirichlet_marginals(n: int, d: int, concentration: float, rng: np.random.Generator) -> np.ndarray:
    return d * rng.dirichlet(np.full(n, concentration))


# ==========================================
# CONDITIONING
# ==========================================

@dataclass(frozen=True)
class ConditioningMeasurement:
    t: np.ndarray
    t_inf: float
    iterations: int
    epsilon_achieved: float
    stopped_by: str = "gap"


def measure_conditioning(
    A: np.ndarray,
    c: Optional[np.ndarray],
    epsilon: float,
    rng: RngLike = None,
    settings: Optional[Settings] = None,
) -> ConditioningMeasurement:
    """
    ||t*||_inf of a high-accuracy minimizer, shifted so max t + min t = 0.

    The solve runs to epsilon * CONDITIONING_TIGHTEN on the gap alone, so the
    reported t is a near-minimizer rather than the first RIP-certified iterate.
    """
    settings = settings or get_settings()
    tight = settings.with_overrides({"NEWTON_STOP_ON_RIP": False})
    t, _, report = minimize_barthe(A, c, epsilon * settings.CONDITIONING_TIGHTEN, rng=rng, settings=tight)
    t = t - (t.max() + t.min()) / 2.0
    return ConditioningMeasurement(t=t, t_inf=float(np.abs(t).max()), iterations=report.iterations,
                                   epsilon_achieved=report.epsilon_achieved, stopped_by=report.stopped_by)


def fit_conditioning(rows: Sequence[BenchRow], cells: int, skipped: int) -> BenchSummary:
    """Least-squares slope through the origin of t_inf on d log(1/sigma), plus the max ratio."""
    x = np.array([r.d * math.log(1.0 / r.sigma) if 0.0 < r.sigma < 1.0 else 0.0 for r in rows])
    y = np.array([r.t_inf for r in rows])
    usable = x > 0.0
    if not usable.any():
        return BenchSummary(cells=cells, runs=len(rows), skipped=skipped, c_fit=0.0, slope=0.0,
                            residual_max=0.0)
    x, y = x[usable], y[usable]
    slope = float(np.dot(x, y) / np.dot(x, x))
    return BenchSummary(
        cells=cells,
        runs=len(rows),
        skipped=skipped,
        c_fit=float(np.max(y / x)),
        slope=slope,
        residual_max=float(np.max(np.abs(y - slope * x))),
    )


def run_conditioning_bench(
    spec: ExperimentSpec, settings: Optional[Settings] = None
) -> Tuple[List[BenchRow], BenchSummary]:
    """
    One smoothed instance per (n, d, sigma, seed) cell, each with its own keyed
    stream so rows do not depend on grid order.
    """
    settings = settings or get_settings()
    rows: List[BenchRow] = []
    skipped = 0
    cells = 0
    for d in spec.d:
        sizes = spec.n or [spec.n_factor * d]
        for n in sizes:
            for sigma_index, sigma in enumerate(spec.sigma):
                cells += 1
                for seed in spec.seed_list():
                    rng = keyed_rng(seed, n, d, sigma_index)
                    instance = generate_smoothed((n, d), sigma, rng, settings=settings)
                    c = None
                    if spec.marginals == MarginalKind.DIRICHLET:
                        c = dirichlet_marginals(n, d, spec.dirichlet_concentration, rng)
                        try:
                            nonuniform_guard(c, n, d, settings=settings)
                        except MarginalTooLarge as exc:
                            logger.info("skipping n={} d={} sigma={} seed={}: {}", n, d, sigma, seed, exc)
                            skipped += 1
                            continue
                    try:
                        result = measure_conditioning(instance.A, c, spec.epsilon, rng, settings)
                    except (Infeasible, InvalidDataset, NotConverged) as exc:
                        logger.warning("run n={} d={} sigma={} seed={} failed: {}", n, d, sigma, seed, exc)
                        skipped += 1
                        continue
                    rows.append(BenchRow(n=n, d=d, sigma=sigma, seed=seed, t_inf=result.t_inf,
                                         iterations=result.iterations,
                                         epsilon_achieved=result.epsilon_achieved))
    summary = fit_conditioning(rows, cells, skipped)
    logger.info("bench: {} runs over {} cells, C_fit={:.4g}, slope={:.4g}",
                summary.runs, cells, summary.c_fit, summary.slope)
    return rows, summary
