"""
Error hierarchy.

Every failure the library can report derives from ForsterError and carries the
process exit code the CLI maps it to (1 failure, 2 infeasible, 3 I/O or parse).
"""

from typing import Optional


class ForsterError(Exception):
    """Base class for all library errors."""

    exit_code: int = 1


# ==========================================
# LINEAR ALGEBRA
# ==========================================

class InvalidDataset(ForsterError):
    """Dataset invariants (shape, row norms, marginals) do not hold."""


class RankDeficient(ForsterError):
    """Matrix rank is below its column count."""


class Overflow(ForsterError):
    """exp(t_i) is not finite; the caller must shift t by a multiple of 1."""


class IllConditioned(ForsterError):
    """Eigenvalue ratio below the configured threshold."""


class DegenerateRow(ForsterError):
    """A transformed row has (numerically) zero norm."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class DenseCapExceeded(ForsterError):
    """Requested dense materialization is above the configured size cap."""


# ==========================================
# OPTIMIZATION
# ==========================================

class NotConverged(ForsterError):
    """An iterative solver hit its cap without certifying its contract."""


class Infeasible(ForsterError):
    """Marginals lie outside (or on the boundary of) the basis polytope."""

    exit_code = 2


# ==========================================
# CLIQUE MACHINERY AND SPARSIFICATION
# ==========================================

class PrerequisiteViolated(ForsterError):
    """Input violates a documented precondition."""


class NormEstimateFailed(ForsterError):
    """A randomized norm or trace estimate was unusable."""


class InconsistentBounds(ForsterError):
    """Decision outcomes contradict the caller's value bounds."""


class OracleFailure(ForsterError):
    """The packing oracle could not produce a feasible answer."""


class PolynomialDegreeExceeded(ForsterError):
    """Required polynomial degree is above the configured cap."""


class KrylovStagnation(ForsterError):
    """Krylov solve did not reach its residual target."""


class PhaseFailure(ForsterError):
    """A homotopy phase of the sparsifier failed."""

    def __init__(self, message: str, phase: Optional[int] = None):
        super().__init__(message if phase is None else f"phase {phase}: {message}")
        self.phase = phase


class QueryBudgetExceeded(PhaseFailure):
    """The matvec oracle was queried more often than allowed."""


# ==========================================
# SMOOTHED ANALYSIS
# ==========================================

class MarginalTooLarge(ForsterError):
    """A marginal exceeds the bounded-marginal cap."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


# ==========================================
# INPUT / OUTPUT
# ==========================================

class ParseError(ForsterError):
    """Malformed input file."""

    exit_code = 3

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DimensionMismatch(ForsterError):
    """Input files disagree on shapes."""

    exit_code = 3
