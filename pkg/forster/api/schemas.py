"""
Pydantic Schemas for Reports and Run Configuration

All machine-readable documents emitted by the library and the CLI.
Field order is declaration order, so JSON output is stable across runs.
"""

from enum import Enum
from typing import Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field


# ==========================================
# ENUMS
# ==========================================

class Backend(str, Enum):
    DENSE = "dense"
    IMPLICIT = "implicit"


class ComputeMode(str, Enum):
    AUTO = "auto"
    DENSE = "dense"
    SKETCHED = "sketched"


class Command(str, Enum):
    TRANSFORM = "transform"
    VERIFY = "verify"
    SPARSIFY = "sparsify"
    BENCH = "bench"


class MarginalKind(str, Enum):
    UNIFORM = "uniform"
    DIRICHLET = "dirichlet"


# ==========================================
# LINEAR ALGEBRA
# ==========================================

class SpectralCertificate(BaseModel):
    """Extreme eigenvalues of the normalized second-moment matrix."""
    model_config = ConfigDict(populate_by_name=True)

    eig_min: float
    eig_max: float
    epsilon_achieved: float
    passed: bool = Field(..., alias="pass", description="epsilon_achieved <= requested epsilon")


# ==========================================
# NEWTON DRIVER
# ==========================================

class SolveReport(BaseModel):
    """Outcome of one minimize_barthe run."""
    iterations: int
    backend: Backend
    epsilon_achieved: float
    log_kappa: float = Field(..., description="log(kappa) actually used by the final run")
    objective_trace: List[float] = Field(default_factory=list)
    gap_estimate: float = Field(..., description="final certified bound on F(t) - min F")
    kappa_doublings: int = 0
    marginal_error: float = Field(0.0, description="max_i |tau_i(diag(exp(t/2)) A) - c_i|")
    failure_probability: float = Field(0.0, description="sparsifier failure budget delta (implicit backend)")
    sparsifier_refreshes: int = 0
    stopped_by: str = Field("gap", description="gap | rip | stalled | budget")
    certificate: Optional[SpectralCertificate] = None


# ==========================================
# SPARSIFIER
# ==========================================

class PhaseReport(BaseModel):
    """One homotopy phase."""
    phase: int
    regularization: float
    mdr_rounds: int
    measured_factor: float
    queries: int
    packing_q: float = Field(1.0, description="worst measured packing ratio Q_run in the phase")


class SparsifyReport(BaseModel):
    """Outcome of sparsify_implicit."""
    n: int
    mode: ComputeMode
    delta: float
    regularization: float
    trace_estimate: float
    phases_planned: int
    phases_run: int
    f_total: float = Field(..., alias="F_total")
    mu_min: float
    mu_max: float
    queries: int
    nnz: int
    phases: List[PhaseReport] = Field(default_factory=list)

    model_config = ConfigDict(populate_by_name=True)


# ==========================================
# SMOOTHED ANALYSIS
# ==========================================

class SubspaceMargin(BaseModel):
    """Worst observed deepness margin for one subspace dimension k."""
    k: int
    subset_size: int
    worst_margin: float = Field(..., description="min over samples of sigma_{k+1} - sqrt(m) * Delta")
    samples: int


class DeepnessWitness(BaseModel):
    """A subspace holding too much marginal weight within distance Delta."""
    k: int
    rows: List[int]
    weight: float
    limit: float


class DeepnessReport(BaseModel):
    """Sampling-based falsifier; never claims certification."""
    eta: float
    delta: float
    per_k: List[SubspaceMargin] = Field(default_factory=list)
    subsets_checked: int = 0
    witnesses: List[DeepnessWitness] = Field(default_factory=list)
    verdict: str = "no violation found"


class ExperimentSpec(BaseModel):
    """Grid for the smoothed-conditioning benchmark."""
    d: List[int] = Field(default_factory=lambda: [5, 10, 20])
    sigma: List[float] = Field(default_factory=lambda: [0.1, 0.01])
    seeds: Union[int, List[int]] = 10
    n: List[int] = Field(default_factory=list, description="explicit row counts; empty means n_factor * d")
    n_factor: int = 4
    epsilon: float = 1e-3
    marginals: MarginalKind = MarginalKind.UNIFORM
    dirichlet_concentration: float = 50.0

    def seed_list(self) -> List[int]:
        if isinstance(self.seeds, int):
            return list(range(self.seeds))
        return list(self.seeds)


class BenchRow(BaseModel):
    n: int
    d: int
    sigma: float
    seed: int
    t_inf: float
    iterations: int
    epsilon_achieved: float


class BenchSummary(BaseModel):
    """Fit of ||t*||_inf against d * log(1/sigma)."""
    cells: int
    runs: int
    skipped: int
    c_fit: float = Field(..., description="max over runs of ||t*||_inf / (d log(1/sigma))")
    slope: float = Field(..., description="least-squares slope through the origin")
    residual_max: float


# ==========================================
# CLI
# ==========================================

class RunConfig(BaseModel):
    """Everything one CLI invocation needs."""
    command: Command
    input: Optional[str] = None
    marginals: Optional[str] = None
    transform: Optional[str] = Field(None, description="R matrix file for verify")
    experiment: Optional[str] = None
    epsilon: float = Field(1e-3, gt=0.0)
    delta: float = Field(0.1, gt=0.0, lt=1.0)
    sigma: Optional[float] = Field(None, ge=0.0)
    regularization: Optional[float] = Field(None, gt=0.0, description="Delta for sparsify")
    kappa: str = "auto"
    backend: Backend = Backend.DENSE
    seed: Optional[int] = None
    threads: int = Field(1, ge=1)
    out_prefix: str = "out"
    binary: bool = False
    write_rows: bool = False
    overrides: Dict[str, Union[int, float, str, bool]] = Field(default_factory=dict)

    def kappa_value(self) -> Optional[float]:
        """None in auto mode, otherwise the numeric kappa."""
        if self.kappa == "auto":
            return None
        return float(self.kappa)
