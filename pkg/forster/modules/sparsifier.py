"""
Implicit Laplacian Sparsifier

Recovers an explicit sparse spectral approximation of a Laplacian L that is
only available through matvecs.

Features:
- Matrix multiplicative weights dictionary recovery, each round calling the
  packing solver on sampled ASOC pieces of the MMW gradient
- Trace and distance estimates for Y = exp(-S) / Tr exp(-S) through a
  Chebyshev polynomial of exp(-S/2)
- Inverse square root access by quadrature over PCG solves, preconditioned by
  the previous phase's sparsifier
- Homotopy over L + Delta 2^{p-q} Pi, or a single dense-reference phase for
  small n
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from loguru import logger
from scipy.sparse.linalg import LinearOperator, eigsh

from forster.api.schemas import ComputeMode, PhaseReport, SparsifyReport
from forster.config import Settings, get_settings
from forster.core.errors import (
    ForsterError,
    OracleFailure,
    PhaseFailure,
    PrerequisiteViolated,
)
from forster.core.operators import (
    BlockApply,
    CountingOperator,
    block_apply,
    block_pcg,
    center,
    exp_half_polynomial,
    gaussian_sketch,
    generalized_extremes_dense,
    generalized_extremes_sketched,
    hutchinson_quadratic,
    hutchinson_trace,
    inv_sqrt_quadrature_nodes,
    lambda_max,
    materialize,
    probe_count,
)
from forster.core.random import draw_seed, spawn
from forster.modules.gridhash import AsocFamily, PointCloud
from forster.modules.packing import PackingInstance, PackingResult, packing_optimize, resolve_mode
from forster.modules.soc import (
    EdgeCombination,
    EdgeVector,
    Partition,
    SparseLaplacian,
    sparsify_clique_asoc,
)

PackingOracle = Callable[[PackingInstance, float, np.random.Generator, Settings], PackingResult]


# ==========================================
# ORACLE
# ==========================================

@dataclass(frozen=True)
class ImplicitLaplacianOracle:
    """Matvec access v -> L v to a hidden graph Laplacian."""

    n: int
    apply: BlockApply
    trace_hint: Optional[float] = None

    @classmethod
    def of(cls, source, trace_hint: Optional[float] = None) -> "ImplicitLaplacianOracle":
        """Wrap an oracle, LinearOperator, SparseLaplacian, sparse or dense matrix."""
        if isinstance(source, ImplicitLaplacianOracle):
            if trace_hint is None:
                return source
            return cls(n=source.n, apply=source.apply, trace_hint=trace_hint)
        if isinstance(source, SparseLaplacian):
            source = source.to_csr()
        if isinstance(source, np.ndarray) or scipy.sparse.issparse(source):
            source = scipy.sparse.linalg.aslinearoperator(source)
        if not isinstance(source, LinearOperator):
            raise PrerequisiteViolated(f"cannot use {type(source).__name__} as a Laplacian oracle")
        return cls(n=source.shape[0], apply=block_apply(source), trace_hint=trace_hint)

    def check(self, rng: np.random.Generator, probes: int = 4, tol: float = 1e-8) -> None:
        """L 1 = 0 and <u, L v> = <v, L u> on random probes, relative to the probe scale."""
        U = rng.standard_normal((self.n, probes))
        V = rng.standard_normal((self.n, probes))
        LU, LV = self.apply(U), self.apply(V)
        scale = max(float(np.abs(LU).max()), float(np.abs(LV).max()), 1.0)
        if np.abs(self.apply(np.ones((self.n, 1)))).max() > tol * scale * self.n:
            raise PrerequisiteViolated("oracle does not annihilate the all-ones vector")
        asym = np.abs(np.sum(U * LV, axis=0) - np.sum(V * LU, axis=0)).max()
        if asym > tol * scale * self.n:
            raise PrerequisiteViolated(f"oracle is not symmetric (mismatch {asym:.3e})")


def _psd_power(B: np.ndarray, power: float, rel_tol: float = 1e-12) -> np.ndarray:
    """B^power on the range of a symmetric PSD matrix (pseudo-power)."""
    eigvals, eigvecs = scipy.linalg.eigh((B + B.T) / 2.0)
    keep = eigvals > rel_tol * max(float(eigvals[-1]), 0.0)
    scaled = np.zeros_like(eigvals)
    scaled[keep] = eigvals[keep] ** power
    return (eigvecs * scaled) @ eigvecs.T


# ==========================================
# MMW EXPONENT
# ==========================================

@dataclass
class MmwExponent:
    """S with matvec access, an operator-norm bound R and an optional dense copy."""

    n: int
    apply: BlockApply
    bound: float
    dense: Optional[np.ndarray] = None

    @classmethod
    def zero(cls, n: int, dense: bool = True) -> "MmwExponent":
        return cls(n=n, apply=lambda V: np.zeros(np.shape(V)), bound=0.0,
                   dense=np.zeros((n, n)) if dense else None)

    @classmethod
    def of_dense(cls, S: np.ndarray) -> "MmwExponent":
        S = (S + S.T) / 2.0
        bound = float(np.abs(scipy.linalg.eigvalsh(S)).max()) if S.size else 0.0
        return cls(n=S.shape[0], apply=lambda V: S @ V, bound=bound, dense=S)

    def exp_dense(self) -> np.ndarray:
        eigvals, eigvecs = scipy.linalg.eigh(self.dense)
        return (eigvecs * np.exp(-eigvals)) @ eigvecs.T

    def half_polynomial(self, settings: Settings, tol: Optional[float] = None) -> BlockApply:
        poly = exp_half_polynomial(self.bound, settings, tol)
        return lambda V: poly.apply(self.apply, np.asarray(V, dtype=np.float64))


def trace_exp_estimate(
    S: MmwExponent,
    delta: float,
    rng: np.random.Generator,
    settings: Optional[Settings] = None,
) -> float:
    """
    Z with 9/10 Tr exp(-S) <= Z <= Tr exp(-S): exact for a dense S, otherwise
    Hutchinson on ||M z||^2 with M >= exp(-S/2) the Chebyshev polynomial.
    """
    settings = settings or get_settings()
    if S.dense is not None:
        return float(np.sum(np.exp(-scipy.linalg.eigvalsh(S.dense))))
    half = S.half_polynomial(settings)
    probes = probe_count(S.n, delta, settings.HUTCHINSON_CONSTANT)
    estimate = hutchinson_quadratic(half, S.n, probes, rng)
    return estimate / (1.0 + settings.CHEBYSHEV_TOL) ** 2


def trace_pyp_estimate(
    apply_P: BlockApply,
    S: MmwExponent,
    delta: float,
    rng: np.random.Generator,
    P_dense: Optional[np.ndarray] = None,
    settings: Optional[Settings] = None,
) -> float:
    """Z with 9/10 Tr(P Y P) <= Z <= Tr(P Y P) for Y = exp(-S) / Tr exp(-S)."""
    settings = settings or get_settings()
    if S.dense is not None and P_dense is not None:
        E = S.exp_dense()
        return float(np.trace(P_dense @ E @ P_dense) / np.trace(E))
    tol = settings.CHEBYSHEV_TOL / 2.0
    half = S.half_polynomial(settings, tol)
    probes = probe_count(S.n, delta / 2.0, settings.HUTCHINSON_CONSTANT)
    first, second = spawn(rng, 2)
    numerator = hutchinson_quadratic(lambda V: half(apply_P(V)), S.n, probes, first)
    denominator = hutchinson_quadratic(half, S.n, probes, second)
    return numerator / denominator / (1.0 + tol) ** 2


def mmw_embed(
    apply_P: BlockApply,
    S: MmwExponent,
    delta: float,
    rng: np.random.Generator,
    P_dense: Optional[np.ndarray] = None,
    settings: Optional[Settings] = None,
) -> PointCloud:
    """
    Points with 1/2 g <= f <= g for g_e = <P Y P, L_e>.

    Rows of sqrt(3 / (4 Z)) P M G^T with G a Gaussian sketch. A dense S with
    k >= n uses the exact square root of P Y P instead, so f = g.
    """
    settings = settings or get_settings()
    n = S.n
    k = probe_count(n, delta, settings.JL_CONSTANT)
    if S.dense is not None and P_dense is not None:
        E = S.exp_dense()
        Z = float(np.trace(E))
        if k >= n:
            return PointCloud(points=_psd_power(P_dense @ E @ P_dense / Z, 0.5))
        half = _psd_power(E, 0.5)
        X = P_dense @ (half @ gaussian_sketch(k, n, rng).T)
        return PointCloud(points=math.sqrt(3.0 / (4.0 * Z)) * X)
    first, second = spawn(rng, 2)
    Z = trace_exp_estimate(S, delta / 2.0, first, settings)
    half = S.half_polynomial(settings)
    X = apply_P(half(gaussian_sketch(k, n, second).T))
    return PointCloud(points=math.sqrt(3.0 / (4.0 * Z)) * np.asarray(X))


@dataclass(frozen=True)
class TruncationGuard:
    alpha: float
    gamma: float


def truncation_guard(points: PointCloud, gamma_estimate: float, rho: float) -> TruncationGuard:
    """
    alpha = (40/9) rho n^4 k^2, so dropping coordinate gaps below gamma / alpha
    keeps at least a quarter of <g, w> for any w with weight ratio rho.

    gamma is raised to the largest coordinate gap when the estimate falls short.
    """
    if rho < 1.0:
        raise PrerequisiteViolated(f"weight ratio rho must be at least 1, got {rho}")
    if gamma_estimate <= 0.0:
        raise PrerequisiteViolated(f"gamma estimate must be positive, got {gamma_estimate}")
    spread = float(np.max(np.ptp(points.points, axis=0))) ** 2 if points.n > 1 else 0.0
    alpha = (40.0 / 9.0) * rho * points.n**4 * points.k**2
    return TruncationGuard(alpha=alpha, gamma=max(gamma_estimate, spread))


# ==========================================
# DICTIONARY RECOVERY
# ==========================================

@dataclass
class MdrState:
    """
    Running sum of the oracle answers x_0..x_{t-1}; S_t = eta P L(sum x) P.

    Dense-reference runs also record <G_t, Y_t>, ||G_t||_op and a lower bound on
    <G_t, Y_t> from the sampled masks per round.
    """

    n: int
    apply_P: BlockApply
    eta: float
    P_dense: Optional[np.ndarray] = None
    x_sum: EdgeCombination = None
    rounds: int = 0
    gains: List[float] = field(default_factory=list)
    gain_norms: List[float] = field(default_factory=list)
    gain_floors: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.x_sum is None:
            self.x_sum = EdgeCombination(self.n)

    @property
    def dense(self) -> bool:
        return self.P_dense is not None

    @property
    def x_bar(self) -> EdgeCombination:
        return self.x_sum.scaled(1.0 / max(self.rounds, 1))

    def exponent(self) -> MmwExponent:
        if self.rounds == 0:
            return MmwExponent.zero(self.n, dense=self.dense)
        if self.dense:
            P = self.P_dense
            return MmwExponent.of_dense(self.eta * (P @ self.x_sum.matvec(P)))
        x_sum, P, eta = self.x_sum, self.apply_P, self.eta
        return MmwExponent(n=self.n, apply=lambda V: eta * P(x_sum.matvec(P(V))),
                           bound=eta * self.rounds)

    def add(self, x_t: EdgeVector, max_terms: int, gain_floor: Optional[float] = None) -> None:
        if self.dense:
            Y = self.exponent().exp_dense()
            Y /= np.trace(Y)
            G = self.P_dense @ x_t.matvec(self.P_dense)
            self.gains.append(float(np.sum(G * Y)))
            self.gain_norms.append(float(scipy.linalg.eigvalsh((G + G.T) / 2.0)[-1]))
            if gain_floor is not None:
                self.gain_floors.append(gain_floor)
        combined = self.x_sum.plus(EdgeCombination(self.n, ((1.0, x_t),)))
        compacted = combined.compact(max_terms)
        if not isinstance(compacted, EdgeCombination):
            compacted = EdgeCombination(self.n, ((1.0, compacted),))
        self.x_sum = compacted
        self.rounds += 1


@dataclass
class MdrResult:
    x_bar: EdgeVector
    factor: float
    rounds: int
    planned_rounds: int
    packing_q: float
    state: MdrState


def _pencil(
    x: EdgeVector,
    apply_P: BlockApply,
    L_dense: Optional[np.ndarray],
    rng: np.random.Generator,
    settings: Settings,
) -> Tuple[float, float]:
    """
    (mu_min, mu_max) with mu_min L <= L(x) <= mu_max L on the complement of 1.

    Exact against a dense L. Otherwise read off the spectrum of P L(x) P: with
    L^+ <= P^2 <= 2 L^+ its top eigenvalue is at least mu_max and half its
    bottom one at most mu_min, so no oracle query is spent.
    """
    n = x.n
    if L_dense is not None:
        Lx = x.matvec(np.eye(n))
        return generalized_extremes_dense((Lx + Lx.T) / 2.0, L_dense)
    sandwiched = lambda V: apply_P(x.matvec(apply_P(V)))  # noqa: E731
    if n <= settings.DENSE_MATERIALIZE_CAP:
        basis = scipy.linalg.null_space(np.ones((1, n)))
        K = basis.T @ np.asarray(sandwiched(basis))
        eigvals = scipy.linalg.eigvalsh((K + K.T) / 2.0) if n > 1 else np.zeros(1)
        top, bottom = float(eigvals[-1]), float(eigvals[0])
    else:
        ones = np.ones((n, 1)) / math.sqrt(n)
        op = LinearOperator((n, n), matvec=lambda v: sandwiched(v[:, None])[:, 0],
                            matmat=sandwiched, dtype=np.float64)
        top = lambda_max(op, rng)
        lifted = LinearOperator(
            (n, n),
            matvec=lambda v: sandwiched(v[:, None])[:, 0] + 2.0 * top * (ones @ (ones.T @ v[:, None]))[:, 0],
            dtype=np.float64,
        )
        bottom = float(eigsh(lifted, k=1, which="SA", v0=rng.standard_normal(n),
                             return_eigenvectors=False)[0])
    if top <= 0.0 or bottom <= 1e-12 * top:
        return 0.0, max(top, 0.0)
    return bottom / 2.0, top


def _pair_gains(S: MmwExponent, P: np.ndarray) -> np.ndarray:
    """<P Y P, L_uv> for every pair, Y = exp(-S) / Tr exp(-S)."""
    Y = S.exp_dense()
    B = P @ (Y / np.trace(Y)) @ P
    diag = np.diag(B)
    return diag[:, None] + diag[None, :] - 2.0 * B


def oracle_mdr(
    n: int,
    apply_P: BlockApply,
    rho: float,
    bounds: Tuple[float, float],
    delta: float,
    rng: np.random.Generator,
    L_dense: Optional[np.ndarray] = None,
    P_dense: Optional[np.ndarray] = None,
    packing_oracle: PackingOracle = packing_optimize,
    settings: Optional[Settings] = None,
) -> MdrResult:
    """
    Matrix multiplicative weights over the packing oracle.

    Requires L^+ <= P^2 <= 2 L^+ for the hidden L. Each round estimates
    gamma ~ Tr(P Y P), embeds g_t = <P Y_t P, L_e>, samples MDR_ORACLE_CALLS
    pieces of its ASOC approximation, and averages the oracle answers into x_t.
    Every MDR_CHECK_EVERY rounds the pencil (L(x_bar), L) is measured, exactly
    against a dense L and through P otherwise; the run stops at the target factor, on stalled progress, or at the round cap.
    Returns x_bar scaled so that (1/F) L <= L(x_bar) <= L.
    """
    settings = settings or get_settings()
    lower, upper = bounds
    dense = P_dense is not None and L_dense is not None
    mode = ComputeMode.DENSE if dense else ComputeMode.SKETCHED
    if P_dense is not None:
        apply_P = lambda V, P=P_dense: P @ V  # noqa: E731

    state = MdrState(n=n, apply_P=apply_P, eta=settings.MDR_ETA, P_dense=P_dense if dense else None)
    max_rounds = settings.MDR_MAX_ROUNDS
    calls = settings.MDR_ORACLE_CALLS
    round_delta = delta / (2.0 * max_rounds)
    planned = max_rounds
    packing_q = 1.0
    best_factor = math.inf
    mu = (0.0, math.inf)

    for t in range(max_rounds):
        round_rng, embed_rng, trace_rng, oracle_rng, check_rng = spawn(rng, 5)
        S = state.exponent()
        gamma = (10.0 / 9.0) * trace_pyp_estimate(apply_P, S, round_delta, trace_rng, state.P_dense, settings)
        points = mmw_embed(apply_P, S, round_delta, embed_rng, state.P_dense, settings)
        guard = truncation_guard(points, gamma, rho)
        family = AsocFamily(points, beta=8.0, gamma=guard.gamma, alpha=guard.alpha,
                            delta=round_delta, base_seed=draw_seed(round_rng), settings=settings)
        pieces = family.sample(calls, round_rng)
        pair_gains = _pair_gains(S, state.P_dense) if state.dense else None
        floor = 0.0

        # empty masks stand for zero answers, so x_t stays an average over every draw
        answers = []
        for (_, mask), child in zip(pieces, spawn(oracle_rng, calls)):
            if mask.is_empty():
                continue
            instance = PackingInstance.build(apply_P, mask, lower, upper, mode, settings)
            result = packing_oracle(instance, round_delta, child, settings)
            packing_q = max(packing_q, result.q_run)
            answers.append(result.x)
            if pair_gains is not None:
                M = mask.dense_mask()
                mass = float(np.triu(result.x.dense_weights() * M).sum())
                floor += mass * float(pair_gains[M].min()) / calls
        if not answers:
            logger.debug("MDR round {}: every sampled ASOC term is empty", t)
        x_t = EdgeCombination(n, tuple((1.0 / calls, x) for x in answers))
        state.add(x_t.compact(settings.PACKING_MAX_TERMS), settings.PACKING_MAX_TERMS,
                  gain_floor=floor if state.dense else None)

        if t == 0:
            planned = min(max_rounds, int(math.ceil(256.0 * calls * packing_q * math.log(max(n, 2)))))
        if state.rounds % settings.MDR_CHECK_EVERY == 0 or state.rounds >= planned:
            mu = _pencil(state.x_bar, apply_P, L_dense, check_rng, settings)
            factor = mu[1] / mu[0] if mu[0] > 0.0 else math.inf
            logger.debug("MDR round {}: factor={:.4g}, packing Q={:.3g}", state.rounds, factor, packing_q)
            if factor <= settings.MDR_TARGET_FACTOR or state.rounds >= planned:
                break
            if math.isfinite(factor) and math.isfinite(best_factor) and factor > 0.99 * best_factor:
                break
            best_factor = min(best_factor, factor)

    if not state.rounds or mu[0] <= 0.0 or state.rounds % settings.MDR_CHECK_EVERY:
        mu = _pencil(state.x_bar, apply_P, L_dense, spawn(rng, 1)[0], settings)
    if mu[0] <= 0.0 or not math.isfinite(mu[1]):
        raise OracleFailure(f"recovered Laplacian does not span the complement of 1 after {state.rounds} rounds")
    return MdrResult(
        x_bar=state.x_bar.scaled(1.0 / mu[1]),
        factor=mu[1] / mu[0],
        rounds=state.rounds,
        planned_rounds=planned,
        packing_q=packing_q,
        state=state,
    )


# ==========================================
# INVERSE SQUARE ROOT
# ==========================================

@dataclass
class InvSqrtAccess:
    """v -> P v with (L + Delta Pi)^+ <= P^2 <= 2 (L + Delta Pi)^+."""

    n: int
    apply: BlockApply
    sparsifier: SparseLaplacian
    nodes: int = 0
    pcg_iterations: int = 0
    columns: int = 0
    dense: Optional[np.ndarray] = None


def inv_sqrt_access(
    x_bar: EdgeVector,
    apply_B: BlockApply,
    regularization: float,
    factor: float,
    delta: float,
    rng: np.random.Generator,
    B_dense: Optional[np.ndarray] = None,
    settings: Optional[Settings] = None,
) -> InvSqrtAccess:
    """
    Requires (1/F) B <= L(x_bar) <= B for B = L + Delta Pi.

    P = 2^{1/4} B^{-1/2} Pi, exact for a dense B. Otherwise B^{-1/2} comes from
    trapezoid quadrature over shifted solves (B + s^2 I)^{-1}, each by block PCG
    preconditioned with a factorization of the sparsified L(x_bar) + s^2 I.
    Once n columns have gone through the solves, P is kept as a matrix, so a
    phase spends at most 2n columns of solves on the oracle.
    """
    settings = settings or get_settings()
    n = x_bar.n
    sparse_rng, _ = spawn(rng, 2)
    L_tilde = x_bar.sparsify(delta, sparse_rng, settings)
    root = 2.0**0.25
    if B_dense is not None:
        P = root * _psd_power(B_dense, -0.5)
        return InvSqrtAccess(n=n, apply=lambda V: P @ V, sparsifier=L_tilde, dense=P)

    csr = L_tilde.to_csr()
    lam_hi = 4.0 * factor * max(float(np.abs(csr).sum(axis=1).max()), regularization)
    shifts, weights = inv_sqrt_quadrature_nodes(regularization / 2.0, lam_hi,
                                                settings.INVSQRT_STEP, settings.INVSQRT_TAIL_TOL)
    identity = scipy.sparse.identity(n, format="csc")
    factors = [scipy.sparse.linalg.splu((csr + s * identity).tocsc()) for s in shifts]
    access = InvSqrtAccess(n=n, apply=None, sparsifier=L_tilde, nodes=len(shifts))

    def solve(V: np.ndarray) -> np.ndarray:
        V = center(V)
        out = np.zeros_like(V)
        for s, w, lu in zip(shifts, weights, factors):
            X, iterations = block_pcg(
                lambda W, s=s: apply_B(W) + s * W,
                V,
                lambda W, lu=lu: lu.solve(np.asarray(W)),
                settings.INVSQRT_KRYLOV_TOL,
                settings.KRYLOV_MAX_ITER,
            )
            access.pcg_iterations += iterations
            out += w * X
        return root * center(out)

    def apply(V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=np.float64)
        if access.dense is None and access.columns + (V.shape[1] if V.ndim == 2 else 1) > n:
            P = solve(np.eye(n))
            access.dense = (P + P.T) / 2.0
            access.columns += n
            logger.debug("inverse square root cached after {} PCG iterations", access.pcg_iterations)
        if access.dense is not None:
            return access.dense @ V
        access.columns += V.shape[1] if V.ndim == 2 else 1
        return solve(V)

    access.apply = apply
    return access


# ==========================================
# HOMOTOPY
# ==========================================

def packing_bounds(n: int, trace: float, regularization: float) -> Tuple[float, float]:
    """
    [l, u] for every packing problem against L + Delta_q Pi: half the smallest
    edge weight Delta_q / n, and half the regularized trace.
    """
    lower = 0.5 * regularization / n
    upper = min((n**4 / 4.0) * (regularization * n + trace), (trace + n * regularization) / 2.0)
    return lower, max(upper, lower)


def weight_ratio(n: int, trace: float, regularization: float) -> float:
    """max_e w_e / min_e w_e for L + Delta Pi, with min w_e >= Delta / n."""
    return 1.0 + n * trace / (2.0 * regularization)


def sparsify_implicit(
    oracle: Union[ImplicitLaplacianOracle, LinearOperator, SparseLaplacian, np.ndarray],
    regularization: float,
    delta: float,
    rng: np.random.Generator,
    settings: Optional[Settings] = None,
    trace_hint: Optional[float] = None,
    mode: Optional[ComputeMode] = None,
) -> Tuple[SparseLaplacian, SparsifyReport]:
    """
    Explicit L_tilde with L + Delta Pi <= L_tilde <= F_total (L + Delta Pi).

    Sketched runs go through p = ceil(log2(Tr L / Delta)) + 1 phases on
    L + Delta 2^{p-q} Pi, starting from P_1 = Pi / sqrt(Delta 2^{p-1}).
    Dense-reference runs (n <= SPARSIFIER_DENSE_CAP) materialize L once and
    only run the final phase. Every oracle query is counted against
    SPARSIFY_QUERY_BUDGET.
    """
    settings = settings or get_settings()
    oracle = ImplicitLaplacianOracle.of(oracle, trace_hint)
    n = oracle.n
    if not 0.0 < delta < 1.0:
        raise PrerequisiteViolated(f"delta must lie in (0, 1), got {delta}")
    mode = resolve_mode(mode or ComputeMode(settings.SPARSIFIER_MODE), n, settings)
    counting = CountingOperator(n, oracle.apply, budget=settings.SPARSIFY_QUERY_BUDGET)
    apply_L = block_apply(counting)
    trace_rng, final_rng, cert_rng, phase_rng = spawn(rng, 4)

    L_dense = None
    if mode == ComputeMode.DENSE:
        L_dense = materialize(counting)
        trace = float(np.trace(L_dense))
    elif oracle.trace_hint is not None:
        trace = float(oracle.trace_hint)
    else:
        probes = probe_count(n, delta / 4.0, settings.HUTCHINSON_CONSTANT)
        trace = 2.0 * hutchinson_trace(apply_L, n, probes, trace_rng)
    if trace <= 0.0:
        raise PrerequisiteViolated("oracle Laplacian has no positive trace")
    if not 0.0 < regularization < trace:
        raise PrerequisiteViolated(f"Delta = {regularization:.4g} must lie in (0, Tr L = {trace:.4g})")

    planned = int(math.ceil(math.log2(trace / regularization))) + 1
    phases = [planned] if L_dense is not None else list(range(1, planned + 1))
    phase_delta = delta / (2.0 * len(phases) + 2.0)
    reports: List[PhaseReport] = []
    x_bar: Optional[EdgeVector] = None
    factor = 1.0

    for q, q_rng in zip(phases, spawn(phase_rng, len(phases))):
        reg_q = regularization * 2.0 ** (planned - q)
        apply_Lq = lambda V, r=reg_q: apply_L(V) + r * center(V)  # noqa: E731
        queries_before = counting.queries
        try:
            access_rng, mdr_rng = spawn(q_rng, 2)
            if L_dense is not None:
                Lq_dense = L_dense + reg_q * (np.eye(n) - 1.0 / n)
                P_dense = 2.0**0.25 * _psd_power(Lq_dense, -0.5)
                apply_P = lambda V, P=P_dense: P @ V  # noqa: E731
            elif q == 1:
                Lq_dense, P_dense = None, None
                apply_P = lambda V, s=math.sqrt(reg_q): center(V) / s  # noqa: E731
            else:
                Lq_dense, P_dense = None, None
                previous = EdgeCombination(n, ((0.5, x_bar),))
                apply_P = inv_sqrt_access(previous, apply_Lq, reg_q, 2.0 * factor,
                                          phase_delta, access_rng, settings=settings).apply
            result = oracle_mdr(
                n,
                apply_P,
                weight_ratio(n, trace, reg_q),
                packing_bounds(n, trace, reg_q),
                phase_delta,
                mdr_rng,
                L_dense=Lq_dense,
                P_dense=P_dense,
                settings=settings,
            )
        except PhaseFailure as exc:
            if exc.phase is None:
                raise PhaseFailure(str(exc), phase=q) from exc
            raise
        except ForsterError as exc:
            raise PhaseFailure(f"{type(exc).__name__}: {exc}", phase=q) from exc
        x_bar, factor = result.x_bar, result.factor
        reports.append(PhaseReport(phase=q, regularization=reg_q, mdr_rounds=result.rounds,
                                   measured_factor=factor, queries=counting.queries - queries_before,
                                   packing_q=result.packing_q))
        logger.info("sparsifier phase {}/{}: Delta_q={:.3g}, rounds={}, factor={:.4g}",
                    q, planned, reg_q, result.rounds, factor)

    try:
        L_tilde = _finalize(x_bar, n, regularization, phase_delta, final_rng, settings)
        B_dense = None if L_dense is None else L_dense + regularization * (np.eye(n) - 1.0 / n)
        if B_dense is not None:
            mu_min, mu_max = generalized_extremes_dense(L_tilde.dense(), B_dense)
        else:
            apply_B = lambda V: apply_L(V) + regularization * center(V)  # noqa: E731
            mu_min, mu_max = generalized_extremes_sketched(L_tilde.to_csr(), apply_B, cert_rng, settings)
    except ForsterError as exc:
        raise PhaseFailure(f"{type(exc).__name__}: {exc}", phase=planned) from exc
    if mu_min <= 0.0:
        raise PhaseFailure("final sparsifier does not dominate L + Delta Pi", phase=planned)

    margin = 1.0 + settings.CERTIFICATE_MARGIN
    L_tilde = L_tilde.scale(margin / mu_min)
    f_total = margin * mu_max / mu_min
    budget = settings.SPARSIFY_NNZ_BUDGET or n * (n - 1) // 2
    if L_tilde.nnz > budget:
        raise PhaseFailure(f"sparsifier has {L_tilde.nnz} edges, budget {budget}", phase=planned)

    report = SparsifyReport(
        n=n,
        mode=mode,
        delta=delta,
        regularization=regularization,
        trace_estimate=trace,
        phases_planned=planned,
        phases_run=len(reports),
        f_total=f_total,
        mu_min=mu_min,
        mu_max=mu_max,
        queries=counting.queries,
        nnz=L_tilde.nnz,
        phases=reports,
    )
    logger.info("sparsified n={} with F_total={:.4g}, nnz={}, queries={}", n, f_total, L_tilde.nnz, counting.queries)
    return L_tilde, report


def _finalize(
    x_bar: EdgeVector,
    n: int,
    regularization: float,
    delta: float,
    rng: np.random.Generator,
    settings: Settings,
) -> SparseLaplacian:
    """Sparsified L(x_bar) plus Delta Pi = (Delta / n) times the complete graph."""
    edge_rng, clique_rng = spawn(rng, 2)
    edges = x_bar.sparsify(delta / 2.0, edge_rng, settings)
    singletons = Partition.singletons(n).pieces
    clique = sparsify_clique_asoc(np.arange(n), singletons, delta / 2.0, clique_rng, n, settings)
    return SparseLaplacian.concat(n, [edges, clique.scale(regularization / n)])
