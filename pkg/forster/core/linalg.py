"""
Dense linear-algebra substrate.

Gram matrices, inverse square roots, leverage scores and the radial isotropic
position check. All arithmetic is float64 with cubic-cost dense kernels.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from forster.api.schemas import SpectralCertificate
from forster.config import Settings, get_settings
from forster.core.errors import (
    DegenerateRow,
    IllConditioned,
    InvalidDataset,
    Overflow,
    RankDeficient,
)


@dataclass(frozen=True)
class Dataset:
    """An n x d matrix with rows a_i and target marginals c."""

    A: np.ndarray
    c: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def c_min(self) -> float:
        return float(self.c.min())

    @classmethod
    def from_arrays(
        cls,
        A: np.ndarray,
        c: Optional[np.ndarray] = None,
        settings: Optional[Settings] = None,
    ) -> "Dataset":
        """Validate and freeze a dataset; omitted marginals default to d/n each."""
        settings = settings or get_settings()
        A = np.array(A, dtype=np.float64, copy=True)
        if A.ndim != 2:
            raise InvalidDataset(f"expected a 2-d matrix, got shape {A.shape}")
        n, d = A.shape
        if d < 1 or n < d:
            raise InvalidDataset(f"need n >= d >= 1, got n={n}, d={d}")
        if not np.all(np.isfinite(A)):
            raise InvalidDataset("matrix has non-finite entries")
        norms = np.linalg.norm(A, axis=1)
        zero = np.flatnonzero(norms <= 0.0)
        if zero.size:
            raise InvalidDataset(f"row {int(zero[0])} has zero norm")

        if c is None:
            c = np.full(n, d / n)
        c = np.array(c, dtype=np.float64, copy=True).reshape(-1)
        if c.shape[0] != n:
            raise InvalidDataset(f"expected {n} marginals, got {c.shape[0]}")
        if np.any(c <= 0.0) or np.any(c > 1.0):
            raise InvalidDataset("marginals must lie in (0, 1]")
        if abs(c.sum() - d) > settings.MARGINAL_SUM_TOL:
            raise InvalidDataset(f"marginals sum to {c.sum():.12g}, expected {d}")

        A.setflags(write=False)
        c.setflags(write=False)
        return cls(A=A, c=c)


# ==========================================
# LEVERAGE SCORES
# ==========================================

def leverage_scores(A: np.ndarray, settings: Optional[Settings] = None) -> np.ndarray:
    """
    tau_i = a_i^T (A^T A)^{-1} a_i.

    Computed as squared row norms of the thin Q factor of a pivoted QR, which
    also certifies full column rank.
    """
    settings = settings or get_settings()
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[1]
    Q, R, _ = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.count_nonzero(diag > settings.RANK_PIVOT_TOL * diag[0])) if diag[0] > 0 else 0
    if rank < d:
        raise RankDeficient(f"matrix has numerical rank {rank} < {d}")
    return np.einsum("ij,ij->i", Q, Q)


def scaled_leverage_scores(
    A: np.ndarray, t: np.ndarray, settings: Optional[Settings] = None
) -> np.ndarray:
    """Leverage scores of diag(exp(t/2)) A; shift-invariant in t."""
    t = np.asarray(t, dtype=np.float64)
    scale = np.exp((t - t.max()) / 2.0)
    return leverage_scores(A * scale[:, None], settings)


# ==========================================
# GRAM MATRICES AND INVERSE SQUARE ROOTS
# ==========================================

def scaled_gram(A: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Z(t) = sum_i exp(t_i) a_i a_i^T."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise Overflow("t has non-finite entries")
    with np.errstate(over="ignore"):
        weights = np.exp(t)
    if not np.all(np.isfinite(weights)):
        raise Overflow("exp(t) overflows; shift t by a multiple of the all-ones vector")
    Z = (A * weights[:, None]).T @ A
    return (Z + Z.T) / 2.0


def inv_sqrt(M: np.ndarray, settings: Optional[Settings] = None) -> np.ndarray:
    """M^{-1/2} for symmetric positive definite M via eigendecomposition."""
    settings = settings or get_settings()
    M = (np.asarray(M, dtype=np.float64) + np.asarray(M, dtype=np.float64).T) / 2.0
    eigvals, eigvecs = scipy.linalg.eigh(M)
    top = eigvals[-1]
    if top <= 0.0 or eigvals[0] <= settings.EIG_RATIO_TOL * top:
        raise IllConditioned(
            f"eigenvalue ratio {eigvals[0] / top if top > 0 else 0.0:.3e} "
            f"below {settings.EIG_RATIO_TOL:.1e}"
        )
    R = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
    return (R + R.T) / 2.0


def log_det_spd(M: np.ndarray) -> float:
    """log det of an SPD matrix through its Cholesky factor."""
    factor, _ = scipy.linalg.cho_factor(M, lower=True)
    return float(2.0 * np.sum(np.log(np.diag(factor))))


# ==========================================
# RADIAL ISOTROPIC POSITION
# ==========================================

def transformed_rows(A: np.ndarray, R: np.ndarray, settings: Optional[Settings] = None) -> np.ndarray:
    """Normalized rows R a_i / ||R a_i||."""
    settings = settings or get_settings()
    B = np.asarray(A, dtype=np.float64) @ np.asarray(R, dtype=np.float64).T
    norms = np.linalg.norm(B, axis=1)
    bad = np.flatnonzero(norms < settings.DEGENERATE_ROW_TOL)
    if bad.size:
        raise DegenerateRow(f"row {int(bad[0])} maps to norm {norms[bad[0]]:.3e}", int(bad[0]))
    return B / norms[:, None]


def verify_rip(
    A: np.ndarray,
    c: np.ndarray,
    R: np.ndarray,
    epsilon: float,
    settings: Optional[Settings] = None,
) -> SpectralCertificate:
    """Check exp(-eps) I <= sum_i c_i (R a_i)(R a_i)^T / ||R a_i||^2 <= exp(eps) I."""
    U = transformed_rows(A, R, settings)
    moment = (U * np.asarray(c, dtype=np.float64)[:, None]).T @ U
    eigvals = scipy.linalg.eigvalsh((moment + moment.T) / 2.0)
    eig_min, eig_max = float(eigvals[0]), float(eigvals[-1])
    if eig_min <= 0.0:
        achieved = float("inf")
    else:
        achieved = max(abs(np.log(eig_min)), abs(np.log(eig_max)))
    return SpectralCertificate(
        eig_min=eig_min,
        eig_max=eig_max,
        epsilon_achieved=achieved,
        passed=bool(achieved <= epsilon),
    )
