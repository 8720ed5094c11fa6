"""
CLI Command Handlers

One handler per subcommand. Each reads its inputs, runs the library call,
writes its outputs next to `out_prefix`, prints the JSON report on stdout and
returns the process exit code:

- 0 success
- 1 failure or verification failed
- 2 infeasible marginals
- 3 I/O or parse error
"""

import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

from loguru import logger
from pydantic import BaseModel

from forster.api.schemas import Backend, Command, ExperimentSpec, RunConfig
from forster.config import Settings, get_settings
from forster.core.errors import DimensionMismatch, ForsterError, ParseError, PrerequisiteViolated
from forster.core.linalg import Dataset, transformed_rows, verify_rip
from forster.core.random import make_rng
from forster.data import io
from forster.modules.newton import minimize_barthe
from forster.modules.smoothed import run_conditioning_bench
from forster.modules.sparsifier import sparsify_implicit

IO_EXIT_CODE = 3

BENCH_COLUMNS = ("n", "d", "sigma", "seed", "t_inf", "iterations", "epsilon_achieved")


# ==========================================
# HELPERS
# ==========================================

def resolve_settings(config: RunConfig, base: Optional[Settings] = None) -> Settings:
    """Defaults, then the --config overrides, then THREADS from the flag."""
    base = base or get_settings()
    overrides = dict(config.overrides)
    overrides.setdefault("THREADS", config.threads)
    return base.with_overrides(overrides)


def _emit(report: BaseModel) -> None:
    sys.stdout.buffer.write(io.dumps_report(report) + b"\n")
    sys.stdout.flush()


def _output(config: RunConfig, suffix: str) -> Path:
    path = Path(f"{config.out_prefix}.{suffix}")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _require(value, flag: str):
    if value is None:
        raise ParseError(f"{flag} is required")
    return value


def _seed(config: RunConfig) -> int:
    if config.seed is None:
        raise ParseError("--seed is required for randomized commands")
    return config.seed


def _dataset(config: RunConfig, settings: Settings) -> Dataset:
    binary = config.binary or settings.BINARY_MATRICES
    A = io.read_matrix(_require(config.input, "--input"), binary)
    c = io.read_vector(config.marginals, expected=A.shape[0]) if config.marginals else None
    return Dataset.from_arrays(A, c, settings)


def _matrix_suffix(config: RunConfig, settings: Settings, name: str) -> Tuple[str, bool]:
    binary = config.binary or settings.BINARY_MATRICES
    return (f"{name}.bin" if binary else f"{name}.txt"), binary


# ==========================================
# COMMANDS
# ==========================================

def cmd_transform(config: RunConfig, settings: Settings) -> int:
    """Compute and verify a (c, eps)-Forster transform; writes R, t and the solve report."""
    dataset = _dataset(config, settings)
    rng_seed = config.seed if config.backend == Backend.DENSE else _seed(config)
    t, R, report = minimize_barthe(
        dataset,
        None,
        config.epsilon,
        kappa=config.kappa_value(),
        backend=config.backend,
        rng=make_rng(rng_seed),
        delta=config.delta,
        settings=settings,
    )
    certificate = verify_rip(dataset.A, dataset.c, R, config.epsilon, settings)

    suffix, binary = _matrix_suffix(config, settings, "R")
    io.write_matrix(_output(config, suffix), R, binary)
    io.write_vector(_output(config, "t.txt"), t)
    io.write_report(_output(config, "report.json"), report)
    if config.write_rows:
        rows_suffix, _ = _matrix_suffix(config, settings, "rows")
        io.write_matrix(_output(config, rows_suffix), transformed_rows(dataset.A, R, settings), binary)
    _emit(report)
    if not certificate.passed:
        logger.error("transform failed verification: eps achieved {:.3e}", certificate.epsilon_achieved)
        return 1
    return 0


def cmd_verify(config: RunConfig, settings: Settings) -> int:
    """Check radial isotropic position of R A against c; exit 0 iff it passes."""
    dataset = _dataset(config, settings)
    R = io.read_matrix(_require(config.transform, "--transform"), config.binary or settings.BINARY_MATRICES)
    if R.shape != (dataset.d, dataset.d):
        raise DimensionMismatch(f"R has shape {R.shape}, expected ({dataset.d}, {dataset.d})")
    certificate = verify_rip(dataset.A, dataset.c, R, config.epsilon, settings)
    _emit(certificate)
    logger.info("verify: eigenvalues in [{:.6g}, {:.6g}], pass={}",
                certificate.eig_min, certificate.eig_max, certificate.passed)
    return 0 if certificate.passed else 1


def cmd_sparsify(config: RunConfig, settings: Settings) -> int:
    """Sparsify a hidden Laplacian seen only through counted matvecs."""
    hidden = io.read_laplacian_tsv(_require(config.input, "--input"))
    regularization = _require(config.regularization, "--regularization")
    if hidden.n < 2:
        raise PrerequisiteViolated("the hidden graph needs at least two vertices")
    L_tilde, report = sparsify_implicit(
        hidden.to_csr(), regularization, config.delta, make_rng(_seed(config)), settings=settings
    )
    io.write_laplacian_tsv(_output(config, "laplacian.tsv"), L_tilde)
    io.write_report(_output(config, "report.json"), report)
    _emit(report)
    return 0


def cmd_bench_smoothed(config: RunConfig, settings: Settings) -> int:
    """Run the smoothed-conditioning grid; writes per-run CSV and a JSON summary."""
    spec = io.read_model(_require(config.experiment, "--experiment"), ExperimentSpec)
    if config.sigma is not None:
        spec = spec.model_copy(update={"sigma": [config.sigma]})
    rows, summary = run_conditioning_bench(spec, settings)
    io.write_csv(_output(config, "bench.csv"), BENCH_COLUMNS,
                 ([getattr(row, column) for column in BENCH_COLUMNS] for row in rows))
    io.write_report(_output(config, "summary.json"), summary)
    _emit(summary)
    return 0


HANDLERS: Dict[Command, Callable[[RunConfig, Settings], int]] = {
    Command.TRANSFORM: cmd_transform,
    Command.VERIFY: cmd_verify,
    Command.SPARSIFY: cmd_sparsify,
    Command.BENCH: cmd_bench_smoothed,
}


def run_command(config: RunConfig, settings: Optional[Settings] = None) -> int:
    """Dispatch and map failures to exit codes; `settings` must already carry the overrides."""
    try:
        settings = settings or resolve_settings(config)
        logger.info("{} started", config.command.value)
        code = HANDLERS[config.command](config, settings)
    except ForsterError as exc:
        logger.error("{} failed ({}): {}", config.command.value, type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("{} failed: {}", config.command.value, exc)
        return IO_EXIT_CODE
    logger.info("{} finished with exit code {}", config.command.value, code)
    return code


def load_overrides(path: Optional[str]) -> Dict[str, object]:
    """UPPERCASE settings keys from a JSON object file."""
    if not path:
        return {}
    data = io.read_json(path)
    if not isinstance(data, dict):
        raise ParseError(f"{path} must hold a JSON object of settings overrides")
    return data