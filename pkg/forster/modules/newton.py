"""
Box-Constrained Newton Driver

Minimizes the regularized Barthe objective with steps
t' = t + argmin_v { <grad F, v> + 1/2 v^T (8 L~) v : v in B(t, 1) n B(0, log kappa) },
where L~ is the exact Hessian (dense backend) or a measured sparsifier of it
(implicit backend). The box QP is solved to half the optimal value, certified
by a first-order lower bound.

Features:
- Auto-kappa: start at log kappa = 4 log n and double with warm starts
- Certified gap tracking from the box-QP lower bounds
- Hessian-stability reuse of the sparsifier between refreshes
- Monotone safeguard: steps that raise F are halved before rejection
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.optimize
import scipy.sparse
from loguru import logger
from scipy.sparse.linalg import LinearOperator

from forster.api.schemas import Backend, SolveReport, SpectralCertificate
from forster.config import Settings, get_settings
from forster.core.errors import (
    IllConditioned,
    Infeasible,
    NotConverged,
    PrerequisiteViolated,
)
from forster.core.linalg import Dataset, scaled_leverage_scores, verify_rip
from forster.core.operators import as_operator, block_apply
from forster.core.random import RngLike, as_generator
from forster.modules.barthe import (
    RegularizedObjective,
    ScalingState,
    hessian_matvec,
    regularized_value_grad_hess,
)
from forster.modules.soc import SparseLaplacian

LaplacianLike = Union[np.ndarray, scipy.sparse.spmatrix, SparseLaplacian, LinearOperator]

MAX_HALVINGS = 30


# ==========================================
# BOX QUADRATIC PROGRAMS
# ==========================================

@dataclass(frozen=True)
class BoxConstraint:
    """Step region lower <= v <= upper."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise PrerequisiteViolated("box is empty or malformed")

    @classmethod
    def for_step(cls, t: np.ndarray, log_kappa: float) -> "BoxConstraint":
        """B_inf(t, 1) n B_inf(0, log kappa) expressed in step coordinates v = t' - t."""
        t = np.asarray(t, dtype=np.float64)
        lower = np.maximum(-1.0, -log_kappa - t)
        upper = np.minimum(1.0, log_kappa - t)
        # Round-off on a boundary coordinate must not flip the interval.
        upper = np.maximum(upper, lower)
        return cls(lower=lower, upper=upper)

    def project(self, v: np.ndarray) -> np.ndarray:
        return np.clip(v, self.lower, self.upper)

    def contains(self, v: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))


@dataclass(frozen=True)
class BoxQpResult:
    v: np.ndarray
    value: float
    lower_bound: float
    iterations: int


def _lipschitz_bound(L: LaplacianLike, apply) -> float:
    """Gershgorin bound when entries are available, a padded power estimate otherwise."""
    if isinstance(L, SparseLaplacian):
        L = L.to_csr()
    if isinstance(L, np.ndarray):
        return float(np.max(np.sum(np.abs(L), axis=1)))
    if scipy.sparse.issparse(L):
        return float(np.max(np.asarray(abs(L).sum(axis=1)).reshape(-1)))
    n = L.shape[0]
    x = np.cos(np.arange(1, n + 1))
    estimate = 0.0
    for _ in range(50):
        y = apply(x)
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            return 0.0
        estimate = norm / float(np.linalg.norm(x))
        x = y / norm
    return 1.5 * estimate


def _certificate(value: float, grad: np.ndarray, v: np.ndarray, box: BoxConstraint) -> float:
    """Convexity lower bound q(v) + min over the box of <grad q(v), w - v>."""
    slack = np.minimum(grad * (box.lower - v), grad * (box.upper - v))
    return float(value + slack.sum())


def _accept(value: float, lower_bound: float, settings: Settings) -> bool:
    return value <= 0.5 * lower_bound or value - lower_bound <= settings.BOX_QP_ABS_TOL


def box_qp_certified(
    L: LaplacianLike,
    b: np.ndarray,
    box: BoxConstraint,
    settings: Optional[Settings] = None,
) -> BoxQpResult:
    """
    Minimize q(v) = <b, v> + 1/2 v^T L v over the box to within half of the optimum.

    L-BFGS-B does the work; an accelerated projected-gradient pass takes over
    when its answer does not certify. Raises NotConverged otherwise.
    """
    settings = settings or get_settings()
    b = np.asarray(b, dtype=np.float64)
    apply = block_apply(as_operator(L))

    def q_and_grad(v: np.ndarray) -> Tuple[float, np.ndarray]:
        Lv = apply(v)
        return float(b @ v + 0.5 * v @ Lv), b + Lv

    v0 = box.project(np.zeros_like(b))
    if not np.any(b) and not np.any(v0):
        return BoxQpResult(v=v0, value=0.0, lower_bound=0.0, iterations=0)

    solution = scipy.optimize.minimize(
        q_and_grad,
        v0,
        jac=True,
        method="L-BFGS-B",
        bounds=scipy.optimize.Bounds(box.lower, box.upper),
        options={"maxiter": settings.BOX_QP_MAX_ITER, "ftol": 1e-15, "gtol": 1e-14},
    )
    v = box.project(solution.x)
    value, grad = q_and_grad(v)
    lower_bound = _certificate(value, grad, v, box)
    iterations = int(solution.nit)
    if _accept(value, lower_bound, settings):
        return BoxQpResult(v=v, value=value, lower_bound=lower_bound, iterations=iterations)

    logger.debug("L-BFGS-B gap {:.3e}; switching to projected gradient", value - lower_bound)
    lipschitz = max(_lipschitz_bound(L, apply), 1e-300)
    x = v.copy()
    y = v.copy()
    momentum = 1.0
    best = (value, lower_bound, v)
    for k in range(1, settings.BOX_QP_MAX_ITER + 1):
        _, grad_y = q_and_grad(y)
        x_next = box.project(y - grad_y / lipschitz)
        momentum_next = (1.0 + math.sqrt(1.0 + 4.0 * momentum**2)) / 2.0
        y = box.project(x_next + ((momentum - 1.0) / momentum_next) * (x_next - x))
        x, momentum = x_next, momentum_next
        if k % 10 == 0 or k == settings.BOX_QP_MAX_ITER:
            value, grad = q_and_grad(x)
            lower_bound = max(_certificate(value, grad, x, box), best[1])
            if value < best[0]:
                best = (value, lower_bound, x.copy())
            else:
                best = (best[0], lower_bound, best[2])
            if _accept(best[0], best[1], settings):
                return BoxQpResult(v=best[2], value=best[0], lower_bound=best[1],
                                   iterations=iterations + k)
    raise NotConverged(
        f"box QP value {best[0]:.6e} not within half of lower bound {best[1]:.6e} "
        f"after {settings.BOX_QP_MAX_ITER} iterations"
    )


def box_qp_solve(
    L: LaplacianLike,
    b: np.ndarray,
    box: BoxConstraint,
    settings: Optional[Settings] = None,
) -> np.ndarray:
    """Step v in the box with q(v) <= 1/2 min over the box of q."""
    return box_qp_certified(L, b, box, settings).v


# ==========================================
# NEWTON STEP
# ==========================================

@dataclass(frozen=True)
class NewtonStep:
    t: np.ndarray
    state: ScalingState
    value: float
    previous_value: float
    lower_bound: float
    gap_certificate: float
    halvings: int
    rejected: bool


def _scaled(L: LaplacianLike, factor: float) -> LaplacianLike:
    if isinstance(L, SparseLaplacian):
        return L.scale(factor)
    if isinstance(L, LinearOperator):
        return LinearOperator(
            L.shape,
            matvec=lambda x: factor * L.matvec(x),
            matmat=lambda X: factor * L.matmat(X),
            dtype=np.float64,
        )
    return factor * L


def termination_threshold(epsilon: float, c: np.ndarray) -> float:
    """f-gap below which the transform is (c, eps)-approximate."""
    return epsilon**2 * float(np.min(c)) ** 2 / 2.0


def recenter(t: np.ndarray) -> np.ndarray:
    """Shift t along 1 so its extreme coordinates average 0."""
    return t - (float(t.max()) + float(t.min())) / 2.0


def newton_step(
    reg: RegularizedObjective,
    state: ScalingState,
    log_kappa: float,
    L_tilde: LaplacianLike,
    alpha: float,
    settings: Optional[Settings] = None,
) -> NewtonStep:
    """
    One box-constrained Newton step against the preconditioner L_tilde.

    Requires Hess F <= L_tilde <= alpha Hess F at t. The returned gap
    certificate bounds F(t) - min F by 120 alpha log(kappa) times minus the
    box-QP lower bound.
    """
    settings = settings or get_settings()
    value, grad, _ = regularized_value_grad_hess(reg, state)
    box = BoxConstraint.for_step(state.t, log_kappa)
    qp = box_qp_certified(_scaled(L_tilde, 8.0), grad, box, settings)
    gap_certificate = 120.0 * alpha * log_kappa * max(-qp.lower_bound, 0.0)

    if not np.any(qp.v):
        return NewtonStep(t=state.t, state=state, value=value, previous_value=value,
                          lower_bound=qp.lower_bound, gap_certificate=gap_certificate,
                          halvings=0, rejected=False)

    step = qp.v
    for halvings in range(MAX_HALVINGS + 1):
        t_new = recenter(state.t + step)
        try:
            new_state = ScalingState.at(reg.dataset, t_new, settings)
            new_value, _, _ = regularized_value_grad_hess(reg, new_state)
        except IllConditioned:
            new_value = math.inf
        if new_value <= value:
            return NewtonStep(t=new_state.t, state=new_state, value=new_value,
                              previous_value=value, lower_bound=qp.lower_bound,
                              gap_certificate=gap_certificate, halvings=halvings,
                              rejected=False)
        step = step / 2.0

    logger.debug("step rejected after {} halvings at F = {:.12g}", MAX_HALVINGS, value)
    return NewtonStep(t=state.t, state=state, value=value, previous_value=value,
                      lower_bound=qp.lower_bound, gap_certificate=gap_certificate,
                      halvings=MAX_HALVINGS, rejected=True)


# ==========================================
# DRIVER
# ==========================================

@dataclass
class _Run:
    converged: bool
    t: np.ndarray
    iterations: int
    trace: List[float]
    gap: float
    stopped_by: str
    refreshes: int
    certificate: Optional[SpectralCertificate]


def _hessian_operator(state: ScalingState) -> LinearOperator:
    n = state.dataset.n
    return LinearOperator(
        (n, n),
        matvec=lambda v: hessian_matvec(state, np.asarray(v).reshape(-1)),
        matmat=lambda V: hessian_matvec(state, np.asarray(V)),
        dtype=np.float64,
    )


class _ImplicitPreconditioner:
    """Sparsifier of Hess F, rebuilt only when t drifts past the stability radius."""

    def __init__(self, reg: RegularizedObjective, rng: np.random.Generator,
                 delta: float, settings: Settings):
        self.reg = reg
        self.rng = rng
        self.delta = delta
        self.settings = settings
        self.t_ref: Optional[np.ndarray] = None
        self.L_ref: Optional[SparseLaplacian] = None
        self.f_ref = 1.0
        self.refreshes = 0

    def __call__(self, state: ScalingState) -> Tuple[SparseLaplacian, float]:
        from forster.modules.sparsifier import sparsify_implicit

        drift = math.inf
        if self.t_ref is not None:
            diff = state.t - self.t_ref
            drift = (float(diff.max()) - float(diff.min())) / 2.0
        if drift > self.settings.IMPLICIT_REFRESH_DRIFT:
            tau = state.tau
            self.L_ref, report = sparsify_implicit(
                _hessian_operator(state),
                regularization=2.0 * self.reg.lam,
                delta=self.delta,
                rng=self.rng,
                settings=self.settings,
                trace_hint=float(np.sum(tau * (1.0 - tau))),
            )
            self.t_ref = state.t.copy()
            self.f_ref = report.f_total
            self.refreshes += 1
            drift = 0.0
            logger.debug("sparsifier refreshed: F_total={:.3g}, nnz={}", report.f_total, report.nnz)
        scale = math.exp(2.0 * drift)
        return self.L_ref.scale(scale), self.f_ref * math.exp(4.0 * drift)


def _solve_at_kappa(
    dataset: Dataset,
    epsilon: float,
    log_kappa: float,
    t0: np.ndarray,
    backend: Backend,
    rng: np.random.Generator,
    delta: float,
    settings: Settings,
) -> _Run:
    reg = RegularizedObjective.for_dataset(dataset, epsilon, log_kappa)
    # the regularizer may add up to the other half of the f-error
    target = termination_threshold(epsilon, dataset.c) / 2.0
    gap_bound = dataset.d * log_kappa**2 / 2.0
    preconditioner = (
        _ImplicitPreconditioner(reg, rng, delta, settings) if backend == Backend.IMPLICIT else None
    )

    t = recenter(np.clip(t0, -log_kappa, log_kappa))
    state = ScalingState.at(dataset, t, settings)
    value, _, _ = regularized_value_grad_hess(reg, state)
    trace = [value]
    alpha = 1.0
    budget = None
    stopped_by = "budget"
    iterations = 0
    while True:
        if settings.NEWTON_STOP_ON_RIP:
            certificate = verify_rip(dataset.A, dataset.c, state.transform(), epsilon, settings)
            if certificate.passed:
                stopped_by = "rip"
                break

        if preconditioner is None:
            L_tilde, alpha = reg.hessian_dense(state, settings), 1.0
        else:
            L_tilde, alpha = preconditioner(state)

        if budget is None or preconditioner is not None:
            rate = 1.0 / (240.0 * alpha * log_kappa)
            budget = min(
                settings.NEWTON_MAX_ITERATIONS,
                int(math.ceil(math.log(max(gap_bound / target, math.e)) / rate)) + settings.NEWTON_ITERATION_SLACK,
            )
        if iterations >= budget:
            break

        step = newton_step(reg, state, log_kappa, L_tilde, alpha, settings)
        iterations += 1
        gap_bound = min(gap_bound, step.gap_certificate)
        state = step.state
        trace.append(step.value)
        logger.debug("iter {}: F={:.12g}, gap<={:.3e}, halvings={}",
                     iterations, step.value, gap_bound, step.halvings)
        if gap_bound <= target:
            stopped_by = "gap"
            break
        if step.rejected:
            stopped_by = "stalled"
            break
        gap_bound *= 1.0 - 1.0 / (240.0 * alpha * log_kappa)

    certificate = verify_rip(dataset.A, dataset.c, state.transform(), epsilon, settings)
    return _Run(
        converged=certificate.passed,
        t=np.array(state.t),
        iterations=iterations,
        trace=trace,
        gap=gap_bound,
        stopped_by=stopped_by,
        refreshes=preconditioner.refreshes if preconditioner is not None else 0,
        certificate=certificate,
    )


def minimize_barthe(
    A: np.ndarray,
    c: Optional[np.ndarray],
    epsilon: float,
    kappa: Optional[float] = None,
    backend: Backend = Backend.DENSE,
    rng: RngLike = None,
    delta: float = 0.1,
    settings: Optional[Settings] = None,
) -> Tuple[np.ndarray, np.ndarray, SolveReport]:
    """
    Compute a (c, eps)-approximate Forster transform.

    kappa=None selects auto mode: log kappa starts at KAPPA_AUTO_FACTOR log n
    and doubles, warm-started, until the radial isotropic check passes or the
    cap KAPPA_CAP_FACTOR d log n is reached (Infeasible). With a fixed kappa a
    failed run raises NotConverged.

    Returns (t, R, report) with R = Z(t)^{-1/2}.
    """
    settings = settings or get_settings()
    dataset = A if isinstance(A, Dataset) else Dataset.from_arrays(A, c, settings)
    rng = as_generator(rng)
    backend = Backend(backend)
    if not 0.0 < epsilon:
        raise PrerequisiteViolated(f"epsilon must be positive, got {epsilon}")
    if kappa is not None and kappa <= 1.0:
        raise PrerequisiteViolated(f"kappa must exceed 1, got {kappa}")

    log_n = math.log(max(dataset.n, 2))
    auto = kappa is None
    log_kappa = settings.KAPPA_AUTO_FACTOR * log_n if auto else math.log(kappa)
    cap = settings.KAPPA_CAP_FACTOR * dataset.d * log_n
    t0 = np.zeros(dataset.n)
    doublings = 0

    logger.info("solving n={}, d={}, eps={:g}, backend={}, kappa={}",
                dataset.n, dataset.d, epsilon, backend.value, "auto" if auto else f"{kappa:g}")
    while True:
        try:
            run = _solve_at_kappa(dataset, epsilon, log_kappa, t0, backend, rng, delta, settings)
        except (IllConditioned, NotConverged) as exc:
            logger.warning("run at log kappa={:.4g} failed: {}", log_kappa, exc)
            run = None
        if run is not None and run.converged:
            break
        if not auto:
            achieved = run.certificate.epsilon_achieved if run is not None else math.inf
            raise NotConverged(
                f"no ({epsilon:g})-Forster transform within log kappa = {log_kappa:.4g} "
                f"(achieved {achieved:.3e})"
            )
        if log_kappa >= cap:
            raise Infeasible(
                f"log kappa reached the cap {cap:.4g} without passing the radial isotropic check; "
                "the marginals are likely outside the basis polytope"
            )
        if run is not None:
            t0 = run.t
        log_kappa = min(2.0 * log_kappa, cap)
        doublings += 1
        logger.warning("doubling kappa: log kappa = {:.4g}", log_kappa)

    state = ScalingState.at(dataset, run.t, settings)
    R = state.transform()
    tau = scaled_leverage_scores(dataset.A, run.t, settings)
    report = SolveReport(
        iterations=run.iterations,
        backend=backend,
        epsilon_achieved=run.certificate.epsilon_achieved,
        log_kappa=log_kappa,
        objective_trace=run.trace,
        gap_estimate=run.gap,
        kappa_doublings=doublings,
        marginal_error=float(np.max(np.abs(tau - dataset.c))),
        failure_probability=delta if backend == Backend.IMPLICIT else 0.0,
        sparsifier_refreshes=run.refreshes,
        stopped_by=run.stopped_by,
        certificate=run.certificate,
    )
    logger.info("solved in {} iterations (eps achieved {:.3e}, stopped by {})",
                report.iterations, report.epsilon_achieved, report.stopped_by)
    return run.t, R, report
