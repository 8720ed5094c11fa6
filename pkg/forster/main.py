"""
Forster Command Line

Subcommands:
1. transform - compute and verify a (c, eps)-Forster transform of a matrix file
2. verify    - check a given R against a matrix and marginals
3. sparsify  - sparsify a Laplacian that is only queried through matvecs
4. bench     - smoothed-conditioning experiment grid

Reports go to stdout as JSON, logs to stderr.
"""

import argparse
import os
import sys
from typing import List, Optional

from loguru import logger
from pydantic import ValidationError

from forster import __version__
from forster.api.schemas import Backend, Command, RunConfig
from forster.core.errors import ForsterError, ParseError

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def configure_logging(level: str) -> None:
    """Single stderr sink for the whole process."""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(),
               format="<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {name}:{function} - {message}")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epsilon", type=float, default=1e-3)
    parser.add_argument("--delta", type=float, default=0.1, help="failure probability for randomized steps")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out-prefix", default="out")
    parser.add_argument("--config", default=None, help="JSON object of settings overrides")
    parser.add_argument("--binary", action="store_true", help="read and write little-endian binary matrices")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forster", description="Approximate Forster transforms")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    transform = sub.add_parser(Command.TRANSFORM.value, help="compute a (c, eps)-Forster transform")
    transform.add_argument("--input", required=True)
    transform.add_argument("--marginals", default=None)
    transform.add_argument("--kappa", default="auto", help="auto or a number above 1")
    transform.add_argument("--backend", choices=[b.value for b in Backend], default=Backend.DENSE.value)
    transform.add_argument("--write-rows", action="store_true")
    _common(transform)

    verify = sub.add_parser(Command.VERIFY.value, help="check radial isotropic position")
    verify.add_argument("--input", required=True)
    verify.add_argument("--marginals", default=None)
    verify.add_argument("--transform", required=True)
    _common(verify)

    sparsify = sub.add_parser(Command.SPARSIFY.value, help="sparsify a hidden Laplacian")
    sparsify.add_argument("--input", required=True, help="TSV edge list of the hidden graph")
    sparsify.add_argument("--regularization", type=float, required=True)
    _common(sparsify)

    bench = sub.add_parser(Command.BENCH.value, help="smoothed-conditioning benchmark")
    bench.add_argument("--experiment", required=True)
    bench.add_argument("--sigma", type=float, default=None)
    _common(bench)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    from forster.api.commands import load_overrides

    fields = {
        "command": args.command,
        "input": getattr(args, "input", None),
        "marginals": getattr(args, "marginals", None),
        "transform": getattr(args, "transform", None),
        "experiment": getattr(args, "experiment", None),
        "epsilon": args.epsilon,
        "delta": args.delta,
        "sigma": getattr(args, "sigma", None),
        "regularization": getattr(args, "regularization", None),
        "kappa": getattr(args, "kappa", "auto"),
        "backend": getattr(args, "backend", Backend.DENSE.value),
        "seed": args.seed,
        "threads": args.threads,
        "out_prefix": args.out_prefix,
        "binary": args.binary,
        "write_rows": getattr(args, "write_rows", False),
        "overrides": load_overrides(args.config),
    }
    config = RunConfig(**fields)
    if config.kappa != "auto":
        try:
            config.kappa_value()
        except ValueError:
            raise ParseError(f"--kappa must be auto or a number, got {config.kappa!r}") from None
    return config


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    for variable in THREAD_VARIABLES:
        os.environ.setdefault(variable, str(args.threads))

    from forster.api.commands import resolve_settings, run_command

    try:
        config = config_from_args(args)
        settings = resolve_settings(config)
    except ValidationError as exc:
        configure_logging("ERROR")
        logger.error("invalid arguments: {}", exc.errors()[0]["msg"])
        return 3
    except ForsterError as exc:
        configure_logging("ERROR")
        logger.error("{}", exc)
        return exc.exit_code
    except OSError as exc:
        configure_logging("ERROR")
        logger.error("{}", exc)
        return 3
    configure_logging(settings.LOG_LEVEL)
    return run_command(config, settings)


if __name__ == "__main__":
    sys.exit(main())
