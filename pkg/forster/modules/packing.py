"""
Packing SDP Solver

max c^T x  s.t.  x >= 0,  sum_e x_e P L_e P <= I,

for a 0/1 support c given by an ASOC mask and a PSD P with matvec access.
The decision routine grows w_{t+1} = w_t o (1 + delta_t) where delta_t comes
from grid-hashing a Johnson-Lindenstrauss embedding of the gradient of the
Schatten-p potential; a binary search over scalings of the instance turns it
into an optimizer with a measured approximation ratio.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
from loguru import logger
from scipy.sparse.linalg import LinearOperator

from forster.api.schemas import ComputeMode
from forster.config import Settings, get_settings
from forster.core.errors import InconsistentBounds, PrerequisiteViolated
from forster.core.operators import (
    BlockApply,
    gaussian_sketch,
    hutchinson_trace,
    lambda_max,
    probe_count,
)
from forster.core.random import spawn
from forster.data.io import append_csv_rows
from forster.modules.gridhash import PointCloud, ScaledCliqueFamily, soc_approximation
from forster.modules.soc import (
    AsocRep,
    DenseEdgeWeights,
    EdgeCombination,
    EdgeVector,
    MaskedSoc,
    Partition,
    SocRep,
    mutual_refinement,
)


# ==========================================
# INSTANCE
# ==========================================

def resolve_mode(mode: ComputeMode, n: int, settings: Settings) -> ComputeMode:
    mode = ComputeMode(mode)
    if mode == ComputeMode.AUTO:
        return ComputeMode.DENSE if n <= settings.SPARSIFIER_DENSE_CAP else ComputeMode.SKETCHED
    return mode


@dataclass(frozen=True)
class PackingInstance:
    """
    Dictionary A_e = scale * P L_e P restricted to the pairs of an ASOC mask,
    with caller-certified bounds lower <= OPT <= upper.
    """

    n: int
    apply_P: BlockApply
    mask: AsocRep
    lower: float
    upper: float
    scale: float = 1.0
    mode: ComputeMode = ComputeMode.DENSE
    P_dense: Optional[np.ndarray] = None

    @classmethod
    def build(
        cls,
        apply_P: BlockApply,
        mask: AsocRep,
        lower: float,
        upper: float,
        mode: ComputeMode = ComputeMode.AUTO,
        settings: Optional[Settings] = None,
    ) -> "PackingInstance":
        settings = settings or get_settings()
        n = mask.n
        mode = resolve_mode(mode, n, settings)
        P_dense = None
        if mode == ComputeMode.DENSE:
            P_dense = np.asarray(apply_P(np.eye(n)))
            P_dense = (P_dense + P_dense.T) / 2.0
        return cls(n=n, apply_P=apply_P, mask=mask, lower=lower, upper=upper,
                   mode=mode, P_dense=P_dense)

    @property
    def dense(self) -> bool:
        return self.P_dense is not None

    def scaled(self, factor: float) -> "PackingInstance":
        return replace(self, scale=self.scale * factor)

    def support(self) -> MaskedSoc:
        """c as the unit clique on [n] under the mask."""
        whole = Partition.whole(np.ones(self.n, dtype=bool))
        return MaskedSoc(SocRep(self.n, ((1.0, whole),)), self.mask)

    def operator(self, x: EdgeVector) -> BlockApply:
        """V -> A(x) V."""
        if self.dense:
            A = self.A_dense(x)
            return lambda V: A @ V
        return lambda V: self.scale * self.apply_P(x.matvec(self.apply_P(V)))

    def A_dense(self, x: EdgeVector) -> np.ndarray:
        P = self.P_dense if self.dense else np.asarray(self.apply_P(np.eye(self.n)))
        A = self.scale * (P @ x.matvec(P))
        return (A + A.T) / 2.0

    def adjoint_dense(self, Y: np.ndarray) -> np.ndarray:
        """A*(Y) as an n x n matrix of pair values <Y, A_uv>."""
        P = self.P_dense if self.dense else np.asarray(self.apply_P(np.eye(self.n)))
        B = self.scale * (P @ Y @ P)
        diag = np.diag(B)
        return diag[:, None] + diag[None, :] - 2.0 * B


def operator_norm(instance: PackingInstance, x: EdgeVector, rng: np.random.Generator) -> float:
    """lambda_max(A(x))."""
    if instance.dense:
        return float(scipy.linalg.eigvalsh(instance.A_dense(x))[-1])
    apply = instance.operator(x)
    op = LinearOperator((instance.n, instance.n),
                        matvec=lambda v: apply(v[:, None])[:, 0],
                        matmat=apply, dtype=np.float64)
    return lambda_max(op, rng)


def pair_count(partition: Partition) -> float:
    sizes = partition.sizes[1:].astype(np.float64)
    return float(np.sum(sizes * (sizes - 1.0)) / 2.0)


# ==========================================
# ITERATES
# ==========================================

@dataclass
class PackingIterate:
    """
    w_t = y_t o c with y_t a SOC keyed by partition, or explicit masked
    weights once the SOC outgrows the term cap.
    """

    n: int
    mask: AsocRep
    terms: Dict[bytes, Tuple[float, Partition]] = field(default_factory=dict)
    W: Optional[np.ndarray] = None
    step: int = 0

    @classmethod
    def start(cls, mask: AsocRep) -> "PackingIterate":
        whole = Partition.whole(np.ones(mask.n, dtype=bool))
        return cls(n=mask.n, mask=mask, terms={whole.key: (1.0, whole)})

    @property
    def num_terms(self) -> int:
        return len(self.terms) if self.W is None else 0

    def edge_vector(self) -> EdgeVector:
        if self.W is not None:
            return DenseEdgeWeights(self.W)
        return MaskedSoc(SocRep(self.n, tuple(self.terms.values())), self.mask)

    def mass(self) -> float:
        """c^T w_t."""
        if self.W is not None:
            return float(self.W.sum() / 2.0)
        whole = Partition.whole(self.mask.support)
        total = 0.0
        for weight, partition in self.terms.values():
            total += weight * (
                pair_count(mutual_refinement(partition, whole))
                - pair_count(mutual_refinement(partition, self.mask.partition))
            )
        return total

    def multiply(self, delta: ScaledCliqueFamily, max_terms: int) -> "PackingIterate":
        """w o (1 + delta) with delta = sum_i b_i 1[same piece of Q_i]."""
        if self.W is not None:
            W = self.W * (1.0 + delta.dense_values())
            return PackingIterate(self.n, self.mask, W=W, step=self.step + 1)
        merged: Dict[bytes, Tuple[float, Partition]] = dict(self.terms)
        for weight, partition in self.terms.values():
            for b, piece_partition in delta.terms:
                refined = mutual_refinement(partition, piece_partition)
                previous = merged.get(refined.key, (0.0, refined))[0]
                merged[refined.key] = (previous + weight * b, refined)
        if len(merged) > max_terms:
            W = MaskedSoc(SocRep(self.n, tuple(merged.values())), self.mask).dense_weights()
            logger.debug("packing iterate flattened at {} terms", len(merged))
            return PackingIterate(self.n, self.mask, W=W, step=self.step + 1)
        return PackingIterate(self.n, self.mask, terms=merged, step=self.step + 1)


# ==========================================
# EMBEDDING AND STEP ORACLE
# ==========================================

def _check_p(p: int) -> None:
    if p < 3 or p % 2 == 0:
        raise PrerequisiteViolated(f"p must be an odd integer >= 3, got {p}")


def schatten_trace_power(
    instance: PackingInstance,
    x: EdgeVector,
    p: int,
    delta: float,
    rng: np.random.Generator,
    settings: Optional[Settings] = None,
) -> float:
    """Tr(A(x)^p): exact for dense instances, Hutchinson through p matvecs otherwise."""
    settings = settings or get_settings()
    if instance.dense:
        eigvals = np.clip(scipy.linalg.eigvalsh(instance.A_dense(x)), 0.0, None)
        return float(np.sum(eigvals**p))
    apply = instance.operator(x)

    def power(V):
        for _ in range(p):
            V = apply(V)
        return V

    probes = probe_count(instance.n, delta, settings.HUTCHINSON_CONSTANT)
    return max(hutchinson_trace(power, instance.n, probes, rng), 0.0)


def schatten_embed(
    instance: PackingInstance,
    w: EdgeVector,
    p: int,
    delta: float,
    rng: np.random.Generator,
    trace_power: Optional[float] = None,
    settings: Optional[Settings] = None,
) -> PointCloud:
    """
    Points whose squared distances f'_uv satisfy 1/2 A*(Y^{p-1}) <= f' <= A*(Y^{p-1})
    for Y = A(w) / ||A(w)||_p.

    Rows of sqrt(3/4) Z^{(1-p)/(2p)} P A(w)^{(p-1)/2} G^T with Z ~ Tr(A(w)^p)
    and G a k x n Gaussian sketch.
    """
    settings = settings or get_settings()
    _check_p(p)
    n = instance.n
    if trace_power is None:
        trace_power = schatten_trace_power(instance, w, p, delta / 2.0, rng, settings)
    k = probe_count(n, delta, settings.JL_CONSTANT)
    if trace_power <= 0.0:
        return PointCloud(points=np.zeros((n, k)))
    apply = instance.operator(w)
    X = gaussian_sketch(k, n, rng).T
    for _ in range((p - 1) // 2):
        X = apply(X)
    X = instance.P_dense @ X if instance.dense else instance.apply_P(X)
    scale = math.sqrt(0.75) * trace_power ** ((1.0 - p) / (2.0 * p)) * math.sqrt(instance.scale)
    return PointCloud(points=scale * np.asarray(X))


def step_oracle(
    points: PointCloud,
    beta: float,
    delta: float,
    rng: np.random.Generator,
    settings: Optional[Settings] = None,
) -> ScaledCliqueFamily:
    """
    SOC approximation of the embedded gradient read as a step: entries in
    [0, alpha] with alpha = 2 beta m, at least beta where the gradient is <= 1,
    zero where it exceeds gamma.
    """
    settings = settings or get_settings()
    gamma = 2.0 * settings.GRID_GAMMA_FACTOR * points.k**2
    family = soc_approximation(points, beta, delta, rng, gamma=gamma / 2.0, settings=settings)
    return replace(family, alpha=2.0 * beta * family.m, gamma=gamma)


def step_parameters(n: int, delta: float, beta: float, settings: Settings) -> Tuple[float, float, int]:
    """(alpha, gamma, m) of the step oracle before it is called."""
    k = probe_count(n, delta, settings.JL_CONSTANT)
    m = int(math.ceil(2.0 * math.log2(max(n, 2) / delta)))
    return 2.0 * beta * m, 2.0 * settings.GRID_GAMMA_FACTOR * k**2, m


# ==========================================
# DECISION
# ==========================================

@dataclass
class DecisionResult:
    returned: bool
    x: Optional[EdgeVector]
    steps: int
    mass_trace: List[float]
    potential_trace: List[float]
    q_bound: float
    dual_values: Optional[np.ndarray] = None
    dual_q_norm: Optional[float] = None


def packing_parameters(n: int, rho: float, settings: Optional[Settings] = None) -> Tuple[int, int, float]:
    """(p, T, beta) with p odd ~ log^{1/3}(n rho), T ~ log^{2/3}(n rho), beta ~ exp(log^{1/3}(n rho))."""
    settings = settings or get_settings()
    L = math.log(max(n * max(rho, 1.0), 2.0))
    p = max(settings.PACKING_P_MIN, int(math.ceil(L ** (1.0 / 3.0))))
    if p % 2 == 0:
        p += 1
    T = max(settings.PACKING_T_MIN, int(math.ceil(L ** (2.0 / 3.0))))
    beta = max(settings.PACKING_BETA_MIN, math.exp(L ** (1.0 / 3.0)))
    # beta^{T/2} must exceed the starting mass c^T c <= n^2 for a return to mean anything
    T = max(T, int(math.ceil(2.0 * math.log(max(n * n, 2)) / math.log(beta))) + 1)
    return p, T, beta


def soc_packing_decision(
    instance: PackingInstance,
    p: int,
    T: int,
    beta: float,
    delta: float,
    rng: np.random.Generator,
    settings: Optional[Settings] = None,
    phase: int = 0,
) -> DecisionResult:
    """
    Return w / c^T w once c^T w >= beta^{T/2}; otherwise report no return,
    with the averaged dual Ybar (as pair values A*(Ybar)) certifying
    OPT <= 2 n^{1/p}.
    """
    settings = settings or get_settings()
    _check_p(p)
    if T < 1:
        raise PrerequisiteViolated(f"T must be positive, got {T}")
    n = instance.n
    iterate = PackingIterate.start(instance.mask)
    mass = iterate.mass()
    step_delta = delta / T
    alpha, gamma, _ = step_parameters(n, step_delta / 2.0, beta, settings)
    threshold = beta ** (T / 2.0)
    mass_trace = [mass]
    potential_trace: List[float] = []
    q_bound = math.inf
    if mass == 0.0:
        return DecisionResult(returned=False, x=None, steps=0, mass_trace=mass_trace,
                              potential_trace=potential_trace, q_bound=q_bound,
                              dual_values=np.zeros((n, n)), dual_q_norm=0.0)

    dual_sum = np.zeros((n, n))
    Ybar = np.zeros((n, n)) if instance.dense else None
    debug_rows = []
    rngs = spawn(rng, 3 * T)
    for t in range(T):
        w = iterate.edge_vector()
        Z = schatten_trace_power(instance, w, p, step_delta / 4.0, rngs[3 * t], settings)
        norm_p = Z ** (1.0 / p) if Z > 0.0 else 0.0
        potential = norm_p - (1.0 + alpha) ** (p - 1) * gamma * mass
        potential_trace.append(potential)
        if t == 0:
            q_bound = potential / threshold + (1.0 + alpha) ** (p - 1) * gamma
        debug_rows.append((phase, t, mass, potential))

        points = schatten_embed(instance, w, p, step_delta / 2.0, rngs[3 * t + 1],
                                trace_power=Z, settings=settings)
        if Ybar is not None and norm_p > 0.0:
            Y = instance.A_dense(w) / norm_p
            Yp = np.linalg.matrix_power(Y, p - 1)
            Ybar += Yp / T
            dual_sum += instance.adjoint_dense(Yp)
        else:
            dual_sum += (4.0 / 3.0) * points.squared_distances()

        delta_t = step_oracle(points, beta, step_delta / 2.0, rngs[3 * t + 2], settings)
        iterate = iterate.multiply(delta_t, settings.PACKING_MAX_TERMS)
        mass = iterate.mass()
        mass_trace.append(mass)
        if mass >= threshold:
            _dump(debug_rows, settings)
            x = iterate.edge_vector()
            logger.debug("packing decision returned at step {} (mass {:.3e})", t + 1, mass)
            return DecisionResult(returned=True, x=EdgeCombination(n, ((1.0 / mass, x),)),
                                  steps=t + 1, mass_trace=mass_trace,
                                  potential_trace=potential_trace, q_bound=q_bound)

    _dump(debug_rows, settings)
    dual_q_norm = None
    if Ybar is not None:
        q = p / (p - 1.0)
        eigvals = np.clip(scipy.linalg.eigvalsh((Ybar + Ybar.T) / 2.0), 0.0, None)
        dual_q_norm = float(np.sum(eigvals**q) ** (1.0 / q))
    logger.debug("packing decision ran {} steps without returning", T)
    return DecisionResult(returned=False, x=None, steps=T, mass_trace=mass_trace,
                          potential_trace=potential_trace, q_bound=q_bound,
                          dual_values=dual_sum / T, dual_q_norm=dual_q_norm)


def _dump(rows, settings: Settings) -> None:
    if settings.PACKING_DEBUG_CSV:
        append_csv_rows(settings.PACKING_DEBUG_CSV, ("phase", "t", "mass", "potential"), rows)


# ==========================================
# OPTIMIZATION
# ==========================================

@dataclass
class PackingResult:
    x: EdgeVector
    value: float
    q_run: float
    upper_certificate: float
    phases: int
    decisions: List[Tuple[float, bool]]


def packing_optimize(
    instance: PackingInstance,
    delta: float,
    rng: np.random.Generator,
    settings: Optional[Settings] = None,
) -> PackingResult:
    """
    Binary search on log scale over OPT in [lower, upper].

    Each phase scales the instance so that a no-return certifies OPT <= mid;
    returns are measured exactly (value 1 / lambda_max(A(x))). The best
    feasible x is returned with Q_run = certified upper bound / value.
    """
    settings = settings or get_settings()
    lower, upper = instance.lower, instance.upper
    if not 0.0 < lower <= upper:
        raise InconsistentBounds(f"bounds [{lower:.4g}, {upper:.4g}] are not an interval in (0, inf)")
    n = instance.n
    c = instance.support()
    c_mass = PackingIterate.start(instance.mask).mass()
    if c_mass == 0.0:
        return PackingResult(x=EdgeCombination(n), value=0.0, q_run=1.0,
                             upper_certificate=0.0, phases=0, decisions=[])

    rngs = iter(spawn(rng, 64))
    lam_c = operator_norm(instance, c, next(rngs))
    best_x: EdgeVector = EdgeCombination(n, ((1.0 / lam_c, c),))
    best = c_mass / lam_c

    p, T, beta = packing_parameters(n, upper / lower, settings)
    ratio = upper / lower
    phases = 1 if ratio <= 2.0 else int(math.ceil(math.log2(math.log2(ratio)))) + 1
    lo, hi, hi_cert = lower, upper, upper
    decisions: List[Tuple[float, bool]] = []
    for phase in range(phases):
        mid = math.sqrt(lo * hi)
        s = mid / (2.0 * n ** (1.0 / p))
        result = soc_packing_decision(instance.scaled(s), p, T, beta, delta / phases,
                                      next(rngs), settings, phase=phase)
        decisions.append((mid, result.returned))
        if result.returned:
            lam = operator_norm(instance, result.x, next(rngs))
            if lam > 0.0 and 1.0 / lam > best:
                best = 1.0 / lam
                best_x = EdgeCombination(n, ((1.0 / lam, result.x),))
            lo = mid
        else:
            hi = hi_cert = min(hi_cert, mid)
        logger.debug("packing phase {}: mid={:.4g}, returned={}, best={:.4g}",
                     phase, mid, result.returned, best)

    if hi_cert < best * (1.0 - 1e-9):
        raise InconsistentBounds(
            f"certified upper bound {hi_cert:.6g} is below the achieved value {best:.6g}"
        )
    if isinstance(best_x, EdgeCombination):
        best_x = best_x.compact(settings.PACKING_MAX_TERMS)
    return PackingResult(x=best_x, value=best, q_run=hi_cert / best, upper_certificate=hi_cert,
                         phases=phases, decisions=decisions)
