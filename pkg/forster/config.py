"""
Forster Configuration

Numerical tolerances, algorithm constants and resource caps, loaded from
environment variables (or a .env file) and overridable per run from a JSON file.
"""

from functools import lru_cache
from typing import Any, Dict, Mapping

from pydantic_settings import BaseSettings

from forster.core.errors import ParseError


class Settings(BaseSettings):
    """Run configuration loaded from environment variables."""

    # Linear algebra thresholds
    RANK_PIVOT_TOL: float = 1e-12
    EIG_RATIO_TOL: float = 1e-14
    DEGENERATE_ROW_TOL: float = 1e-14
    MARGINAL_SUM_TOL: float = 1e-9

    # Dense caps
    DENSE_HESSIAN_CAP: int = 5000
    DENSE_MATERIALIZE_CAP: int = 500

    # Newton driver
    KAPPA_AUTO_FACTOR: float = 4.0
    KAPPA_CAP_FACTOR: float = 64.0
    NEWTON_ITERATION_SLACK: int = 50
    NEWTON_MAX_ITERATIONS: int = 20000
    NEWTON_STOP_ON_RIP: bool = True
    BOX_QP_MAX_ITER: int = 2000
    BOX_QP_ABS_TOL: float = 1e-12
    IMPLICIT_REFRESH_DRIFT: float = 0.25

    # Clique machinery and grid hashing
    BIPARTITE_SAMPLE_CONSTANT: float = 9.0
    GRID_GAMMA_FACTOR: float = 16.0
    ASOC_LADDER_RATIO: float = 1.1
    ASOC_TRIAL_CONSTANT: float = 8.0

    # Sketching
    JL_CONSTANT: float = 24.0
    HUTCHINSON_CONSTANT: float = 24.0

    # Packing SDP
    PACKING_P_MIN: int = 3
    PACKING_T_MIN: int = 4
    PACKING_BETA_MIN: float = 8.0
    PACKING_MAX_TERMS: int = 512
    PACKING_DEBUG_CSV: str = ""

    # Matrix multiplicative weights recovery
    MDR_ETA: float = 0.5
    MDR_MAX_ROUNDS: int = 2000
    MDR_CHECK_EVERY: int = 4
    MDR_ORACLE_CALLS: int = 4
    MDR_TARGET_FACTOR: float = 64.0
    CHEBYSHEV_TOL: float = 0.05
    CHEBYSHEV_MAX_DEGREE: int = 4096

    # Krylov inverse square root
    KRYLOV_TOL: float = 1e-10
    KRYLOV_MAX_ITER: int = 1000
    INVSQRT_KRYLOV_TOL: float = 1e-6
    INVSQRT_STEP: float = 0.5
    INVSQRT_TAIL_TOL: float = 1e-3

    # Sparsifier homotopy
    SPARSIFIER_MODE: str = "auto"  # auto | dense | sketched
    SPARSIFIER_DENSE_CAP: int = 100
    SPARSIFY_QUERY_BUDGET: int = 2_000_000
    SPARSIFY_NNZ_BUDGET: int = 0  # 0 means n(n-1)/2
    CERTIFICATE_MARGIN: float = 1e-6

    # Smoothed analysis
    DEEPNESS_ETA: float = 0.1
    DEEPNESS_SAMPLES: int = 1000
    MARGINAL_CONST: float = 2.0
    NORM_GUARD_LOW: float = 1.0 / 6.0
    NORM_GUARD_HIGH: float = 2.0
    NORM_GUARD_RESAMPLES: int = 10
    CONDITIONING_TIGHTEN: float = 0.1  # bench solves run at epsilon * this, with no RIP stop

    # CLI
    BINARY_MATRICES: bool = False
    LOG_LEVEL: str = "INFO"
    THREADS: int = 1

    class Config:
        env_file = ".env"
        case_sensitive = True

    def with_overrides(self, overrides: Mapping[str, Any]) -> "Settings":
        """Return a validated copy with the given fields replaced."""
        unknown = sorted(set(overrides) - set(type(self).model_fields))
        if unknown:
            raise ParseError(f"unknown config keys: {', '.join(unknown)}")
        merged: Dict[str, Any] = {**self.model_dump(), **dict(overrides)}
        return type(self).model_validate(merged)


@lru_cache()
def get_settings() -> Settings:
    """Return cached settings instance."""
    return Settings()


settings = get_settings()
