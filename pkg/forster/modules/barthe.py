"""
Barthe's Objective

f(t) = -<c, t> + log det Z(t), Z(t) = A^T diag(exp(t)) A, and its derivatives:
value, gradient, dense Hessian, Hessian-vector products, and the regularized
objective F(t) = f(t) + lam * t^T Pi t minimized by the Newton driver.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from forster.config import Settings, get_settings
from forster.core.errors import DenseCapExceeded
from forster.core.linalg import Dataset, inv_sqrt, log_det_spd, scaled_gram
from forster.core.operators import center


@dataclass(frozen=True)
class ScalingState:
    """
    The iterate t with its caches.

    Z, R and s are stored relative to shift = max(t): Z = Z(t - shift),
    R = Z^{-1/2}, s = exp((t - shift)/2). The products s_i * R a_i, the
    scores tau and every derivative are unaffected by the shift, and
    sum_i s_i^2 (R a_i)(R a_i)^T = I.
    """

    dataset: Dataset
    t: np.ndarray
    shift: float
    Z: np.ndarray
    R: np.ndarray
    rows: np.ndarray   # R a_i, one per row
    s: np.ndarray
    log_det: float     # log det Z(t), shift included

    @classmethod
    def at(cls, dataset: Dataset, t: np.ndarray, settings: Optional[Settings] = None) -> "ScalingState":
        t = np.array(t, dtype=np.float64, copy=True).reshape(-1)
        shift = float(t.max())
        Z = scaled_gram(dataset.A, t - shift)
        R = inv_sqrt(Z, settings)
        rows = dataset.A @ R
        s = np.exp((t - shift) / 2.0)
        log_det = log_det_spd(Z) + dataset.d * shift
        t.setflags(write=False)
        return cls(dataset=dataset, t=t, shift=shift, Z=Z, R=R, rows=rows, s=s, log_det=log_det)

    @property
    def scaled_rows(self) -> np.ndarray:
        """u_i = s_i R a_i."""
        return self.rows * self.s[:, None]

    @property
    def tau(self) -> np.ndarray:
        """tau_i = s_i^2 ||R a_i||^2 = Tr M_i(t)."""
        U = self.scaled_rows
        return np.einsum("ij,ij->i", U, U)

    def transform(self) -> np.ndarray:
        """R(t) = Z(t)^{-1/2} with the shift undone."""
        return self.R * math.exp(-self.shift / 2.0)


# ==========================================
# OBJECTIVE AND DERIVATIVES
# ==========================================

def objective(state: ScalingState) -> float:
    return float(-state.dataset.c @ state.t + state.log_det)


def gradient(state: ScalingState) -> np.ndarray:
    return state.tau - state.dataset.c


def hessian_dense(state: ScalingState, settings: Optional[Settings] = None) -> np.ndarray:
    """H = diag(tau) - (U U^T) o (U U^T), a graph Laplacian."""
    settings = settings or get_settings()
    n = state.dataset.n
    if n > settings.DENSE_HESSIAN_CAP:
        raise DenseCapExceeded(f"n = {n} exceeds dense Hessian cap {settings.DENSE_HESSIAN_CAP}")
    U = state.scaled_rows
    G = U @ U.T
    H = np.diag(state.tau) - G * G
    return (H + H.T) / 2.0


def hessian_matvec(state: ScalingState, v: np.ndarray) -> np.ndarray:
    """
    H v without forming H.

    (H v)_i = tau_i v_i - u_i^T C u_i with C = sum_j v_j u_j u_j^T, which is the
    per-row quadratic form through Z^{-1}(A^T diag(exp(t) v) A) Z^{-1}. Accepts a
    single vector or an (n, b) block.
    """
    v = np.asarray(v, dtype=np.float64)
    U = state.scaled_rows
    tau = state.tau
    if v.ndim == 1:
        C = (U * v[:, None]).T @ U
        return tau * v - np.einsum("ia,ab,ib->i", U, C, U)
    C = np.einsum("ik,ia,ib->kab", v, U, U)
    return tau[:, None] * v - np.einsum("ia,kab,ib->ik", U, C, U)


# ==========================================
# REGULARIZED OBJECTIVE
# ==========================================

@dataclass(frozen=True)
class RegularizedObjective:
    """F(t) = f(t) + lam * t^T Pi t with lam = eps^2 c_min^2 / (4 log^2 kappa)."""

    dataset: Dataset
    epsilon: float
    c_min: float
    log_kappa: float

    @classmethod
    def for_dataset(cls, dataset: Dataset, epsilon: float, log_kappa: float) -> "RegularizedObjective":
        return cls(dataset=dataset, epsilon=epsilon, c_min=dataset.c_min, log_kappa=log_kappa)

    @property
    def lam(self) -> float:
        return self.epsilon**2 * self.c_min**2 / (4.0 * self.log_kappa**2)

    def penalty(self, t: np.ndarray) -> float:
        ct = center(t)
        return float(self.lam * ct @ ct)

    def hessian_dense(self, state: ScalingState, settings: Optional[Settings] = None) -> np.ndarray:
        """Dense H + 2 lam Pi."""
        n = state.dataset.n
        H = hessian_dense(state, settings)
        return H + 2.0 * self.lam * (np.eye(n) - np.full((n, n), 1.0 / n))


def regularized_value_grad_hess(
    reg: RegularizedObjective,
    state: ScalingState,
    v: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray, Optional[np.ndarray]]:
    """(F(t), grad F(t), Hess F(t) v) with Pi applied as v - mean(v) 1."""
    value = objective(state) + reg.penalty(state.t)
    grad = gradient(state) + 2.0 * reg.lam * center(state.t)
    hv = None
    if v is not None:
        hv = hessian_matvec(state, v) + 2.0 * reg.lam * center(v)
    return value, grad, hv
