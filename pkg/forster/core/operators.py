"""
Matvec-only numerical kernels.

Shared by the packing solver and the sparsifier: the centering projection,
operator wrappers with query accounting, Hutchinson trace estimation, Gaussian
sketches, Chebyshev polynomial application, block preconditioned conjugate
gradients, an inverse square root by quadrature, and extreme eigenvalues.
"""

import math
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse
from loguru import logger
from scipy.sparse.linalg import LinearOperator, aslinearoperator, eigsh

from forster.config import Settings, get_settings
from forster.core.errors import (
    KrylovStagnation,
    NormEstimateFailed,
    PolynomialDegreeExceeded,
    QueryBudgetExceeded,
)

BlockApply = Callable[[np.ndarray], np.ndarray]


# ==========================================
# PROJECTIONS AND OPERATOR WRAPPERS
# ==========================================

def center(v: np.ndarray) -> np.ndarray:
    """Pi v = v - mean(v) 1, column-wise for blocks."""
    v = np.asarray(v, dtype=np.float64)
    return v - v.mean(axis=0, keepdims=True)


def as_operator(M) -> LinearOperator:
    """LinearOperator view of a dense array, sparse matrix, operator or object with to_csr()."""
    if isinstance(M, LinearOperator):
        return M
    if hasattr(M, "to_csr"):
        return aslinearoperator(M.to_csr())
    return aslinearoperator(M)


def scaled_operator(op: LinearOperator, factor: float) -> LinearOperator:
    return LinearOperator(
        op.shape,
        matvec=lambda v: factor * op.matvec(v),
        matmat=lambda V: factor * op.matmat(V),
        dtype=np.float64,
    )


def block_apply(op: LinearOperator) -> BlockApply:
    """Function applying op to an (n,) vector or an (n, b) block."""

    def apply(V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=np.float64)
        if V.ndim == 1:
            return np.asarray(op.matvec(V)).reshape(-1)
        return np.asarray(op.matmat(V))

    return apply


def materialize(op: LinearOperator) -> np.ndarray:
    """Dense symmetric matrix from n applications."""
    n = op.shape[0]
    M = np.asarray(op.matmat(np.eye(n)))
    return (M + M.T) / 2.0


class CountingOperator(LinearOperator):
    """
    Symmetric matvec oracle that counts queried vectors.

    A block of b columns counts as b queries. Exceeding the budget raises
    QueryBudgetExceeded.
    """

    def __init__(self, n: int, apply: BlockApply, budget: Optional[int] = None):
        super().__init__(dtype=np.float64, shape=(n, n))
        self._apply = apply
        self.budget = budget
        self.queries = 0

    def _charge(self, count: int) -> None:
        self.queries += count
        if self.budget is not None and self.queries > self.budget:
            raise QueryBudgetExceeded(f"oracle queried {self.queries} times, budget {self.budget}")

    def _matvec(self, v):
        self._charge(1)
        return np.asarray(self._apply(np.asarray(v, dtype=np.float64).reshape(-1))).reshape(-1)

    def _matmat(self, V):
        V = np.asarray(V, dtype=np.float64)
        self._charge(V.shape[1])
        return np.asarray(self._apply(V)).reshape(V.shape)

    def _adjoint(self):
        return self


# ==========================================
# RANDOMIZED ESTIMATORS
# ==========================================

def probe_count(n: int, delta: float, constant: float) -> int:
    """ceil(constant * log(n / delta)) probes, at least 8."""
    return max(8, int(math.ceil(constant * math.log(max(n, 2) / delta))))


def rademacher(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(np.array([-1.0, 1.0]), size=(n, count))


def gaussian_sketch(k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """k x n matrix with i.i.d. N(0, 1/k) entries."""
    return rng.standard_normal((k, n)) / math.sqrt(k)


def hutchinson_quadratic(
    half_apply: BlockApply,
    n: int,
    probes: int,
    rng: np.random.Generator,
) -> float:
    """
    Estimate Tr(B^T B) as the mean of ||B z||^2 over Rademacher probes z.

    `half_apply` applies B; callers pass the half power of a PSD matrix so the
    estimator is a sum of squares. Raises NormEstimateFailed when the sample
    spread makes the estimate unusable.
    """
    Z = rademacher(n, probes, rng)
    values = np.sum(np.asarray(half_apply(Z)) ** 2, axis=0)
    estimate = float(values.mean())
    if not np.isfinite(estimate) or estimate < 0.0:
        raise NormEstimateFailed(f"trace estimate {estimate} is not a finite nonnegative number")
    if estimate > 0.0:
        stderr = float(values.std(ddof=1) / math.sqrt(probes)) if probes > 1 else 0.0
        if stderr > 0.5 * estimate:
            raise NormEstimateFailed(
                f"trace estimate {estimate:.3e} has standard error {stderr:.3e}; add probes"
            )
    return estimate


def hutchinson_trace(apply: BlockApply, n: int, probes: int, rng: np.random.Generator) -> float:
    """Plain Hutchinson estimate of Tr(M) for symmetric M."""
    Z = rademacher(n, probes, rng)
    estimate = float(np.mean(np.sum(Z * np.asarray(apply(Z)), axis=0)))
    if not np.isfinite(estimate):
        raise NormEstimateFailed("trace estimate is not finite")
    return estimate


# ==========================================
# CHEBYSHEV POLYNOMIALS
# ==========================================

class ChebyshevApproximation:
    """
    Polynomial p on [lo, hi] with p >= f >= (1 - tol) p in relative terms,
    built by Chebyshev interpolation and applied to a symmetric operator by the
    three-term recurrence.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                 degree: int, max_degree: int, tol: float):
        if hi <= lo:
            hi = lo + 1.0
        self.lo, self.hi = lo, hi
        grid = np.linspace(lo, hi, 4096)
        target = fn(grid)
        while True:
            if degree > max_degree:
                raise PolynomialDegreeExceeded(
                    f"degree {degree} needed on [{lo:.3g}, {hi:.3g}] exceeds cap {max_degree}"
                )
            series = np.polynomial.chebyshev.Chebyshev.interpolate(fn, degree, domain=[lo, hi])
            rel_err = float(np.max(np.abs(series(grid) - target) / target))
            if rel_err <= tol / 2.0:
                break
            degree *= 2
        self.degree = degree
        # Scale up so the polynomial dominates fn on the whole interval.
        self.coef = series.coef / (1.0 - rel_err)
        self.relative_error = rel_err

    def apply(self, op_apply: BlockApply, V: np.ndarray) -> np.ndarray:
        """p(M) V for symmetric M with spectrum inside [lo, hi]."""
        mid = (self.hi + self.lo) / 2.0
        half = (self.hi - self.lo) / 2.0

        def mapped(X):
            return (op_apply(X) - mid * X) / half

        T_prev = np.array(V, dtype=np.float64)
        result = self.coef[0] * T_prev
        if len(self.coef) == 1:
            return result
        T_curr = mapped(T_prev)
        result = result + self.coef[1] * T_curr
        for c in self.coef[2:]:
            T_next = 2.0 * mapped(T_curr) - T_prev
            result = result + c * T_next
            T_prev, T_curr = T_curr, T_next
        return result


def exp_half_polynomial(R: float, settings: Optional[Settings] = None,
                        tol: Optional[float] = None) -> ChebyshevApproximation:
    """Polynomial M ~ exp(-x/2) on [0, R] with (1 - tol) M <= exp(-x/2) <= M."""
    settings = settings or get_settings()
    tol = tol or settings.CHEBYSHEV_TOL
    R = max(float(R), 1e-12)
    degree = max(2, int(math.ceil(math.e * R + math.log(1.0 / tol))))
    if degree > settings.CHEBYSHEV_MAX_DEGREE:
        raise PolynomialDegreeExceeded(
            f"R = {R:.3g} needs degree {degree} > cap {settings.CHEBYSHEV_MAX_DEGREE}"
        )
    return ChebyshevApproximation(
        lambda x: np.exp(-x / 2.0), 0.0, R, degree,
        settings.CHEBYSHEV_MAX_DEGREE, tol,
    )


# ==========================================
# KRYLOV SOLVERS
# ==========================================

def block_pcg(
    apply_A: BlockApply,
    B: np.ndarray,
    apply_M: BlockApply,
    tol: float,
    max_iter: int,
) -> Tuple[np.ndarray, int]:
    """
    Solve A X = B column-wise by preconditioned conjugate gradients.

    apply_M applies the preconditioner inverse. Stops when every column's
    residual is below tol times its right-hand-side norm.
    """
    B = np.asarray(B, dtype=np.float64)
    vector = B.ndim == 1
    if vector:
        B = B[:, None]
    X = np.zeros_like(B)
    R = B.copy()
    b_norms = np.linalg.norm(B, axis=0)
    b_norms[b_norms == 0.0] = 1.0
    Zr = apply_M(R)
    D = Zr.copy()
    rz = np.sum(R * Zr, axis=0)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        AD = apply_A(D)
        dAd = np.sum(D * AD, axis=0)
        active = dAd > 0.0
        step = np.where(active, rz / np.where(active, dAd, 1.0), 0.0)
        X += D * step
        if iterations % 25 == 0:
            R = B - apply_A(X)
        else:
            R -= AD * step
        residual = np.linalg.norm(R, axis=0) / b_norms
        if np.all(residual <= tol):
            break
        Zr = apply_M(R)
        rz_new = np.sum(R * Zr, axis=0)
        beta = np.where(rz > 0.0, rz_new / np.where(rz > 0.0, rz, 1.0), 0.0)
        D = Zr + D * beta
        rz = rz_new
    else:
        worst = float(np.max(np.linalg.norm(B - apply_A(X), axis=0) / b_norms))
        raise KrylovStagnation(f"PCG residual {worst:.3e} above {tol:.1e} after {max_iter} iterations")
    return (X[:, 0] if vector else X), iterations


def inv_sqrt_quadrature_nodes(
    lam_lo: float, lam_hi: float, step: float, tail_tol: float
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Trapezoid nodes for B^{-1/2} = (2/pi) int exp(tau) (B + exp(2 tau) I)^{-1} dtau.

    Returns (shifts s^2 = exp(2 tau_j), weights (2/pi) h exp(tau_j)).
    """
    tau_lo = 0.5 * math.log(lam_lo) + math.log(tail_tol)
    tau_hi = 0.5 * math.log(lam_hi) - math.log(tail_tol)
    taus = np.arange(tau_lo, tau_hi + step, step)
    return np.exp(2.0 * taus), (2.0 / math.pi) * step * np.exp(taus)


# ==========================================
# EXTREME EIGENVALUES
# ==========================================

def lambda_max(op: LinearOperator, rng: np.random.Generator, tol: float = 1e-8) -> float:
    """Largest eigenvalue of a symmetric operator (dense for small n)."""
    n = op.shape[0]
    if n <= 64:
        return float(scipy.linalg.eigvalsh(materialize(op))[-1])
    v0 = rng.standard_normal(n)
    return float(eigsh(op, k=1, which="LA", v0=v0, tol=tol, return_eigenvectors=False)[0])


def generalized_extremes_dense(
    L_tilde: np.ndarray, B: np.ndarray
) -> Tuple[float, float]:
    """Extreme eigenvalues of the pencil (L_tilde, B) on the complement of 1."""
    n = B.shape[0]
    basis = scipy.linalg.null_space(np.ones((1, n)))
    Lr = basis.T @ L_tilde @ basis
    Br = basis.T @ B @ basis
    eigvals = scipy.linalg.eigh((Lr + Lr.T) / 2.0, (Br + Br.T) / 2.0, eigvals_only=True)
    return float(eigvals[0]), float(eigvals[-1])


def generalized_extremes_sketched(
    L_tilde: scipy.sparse.spmatrix,
    apply_B: BlockApply,
    rng: np.random.Generator,
    settings: Optional[Settings] = None,
) -> Tuple[float, float]:
    """
    Extreme eigenvalues of the pencil (L_tilde, B) with matvec access to B.

    Both operators get the same rank-one term along 1, so that direction has
    eigenvalue 1 and can only widen the reported range.
    """
    settings = settings or get_settings()
    n = L_tilde.shape[0]
    ones = np.ones((n, 1)) / math.sqrt(n)
    anchor = float(L_tilde.diagonal().mean()) or 1.0
    L_reg = (L_tilde + anchor * scipy.sparse.csr_matrix(ones @ ones.T)).tocsc()
    lu = scipy.sparse.linalg.splu(L_reg)

    def B_reg(V):
        V = np.asarray(V, dtype=np.float64)
        return apply_B(V) + anchor * ones @ (ones.T @ V)

    def B_reg_inv(V):
        X, _ = block_pcg(B_reg, V, lambda W: lu.solve(np.asarray(W)), settings.KRYLOV_TOL, settings.KRYLOV_MAX_ITER)
        return X

    shape = (n, n)
    B_op = LinearOperator(shape, matvec=lambda v: B_reg(v[:, None])[:, 0], dtype=np.float64)
    L_op = LinearOperator(shape, matvec=lambda v: L_reg @ v, dtype=np.float64)
    L_inv = LinearOperator(shape, matvec=lambda v: lu.solve(v), dtype=np.float64)
    B_inv = LinearOperator(shape, matvec=lambda v: B_reg_inv(v[:, None])[:, 0], dtype=np.float64)

    top_L = float(eigsh(L_op, k=1, M=B_op, Minv=B_inv, which="LA",
                        v0=rng.standard_normal(n), return_eigenvectors=False)[0])
    top_B = float(eigsh(B_op, k=1, M=L_op, Minv=L_inv, which="LA",
                        v0=rng.standard_normal(n), return_eigenvectors=False)[0])
    logger.debug("pencil extremes: mu_max={:.4g}, 1/mu_min={:.4g}", top_L, top_B)
    return min(1.0 / top_B, 1.0), max(top_L, 1.0)
