"""Command-line entry point: `saefusion <subcommand> [--config ...]`."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .. import get_version
from ..config import PipelineConfig, load_config
from ..errors import ConfigError, InputError, SaeFusionError
from ..models import CommandStatus, CommandSummary
from .service import PipelineService

logger = logging.getLogger("saefusion.cli")

LOG_FORMAT = "%(levelname)s:%(name)s:%(message)s"
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2

COMMANDS: dict[str, tuple[str, Callable[[PipelineService], CommandSummary]]] = {
    "direct": ("post-stratified direct estimates per region", PipelineService.run_direct),
    "upscale": ("variogram fit and block kriging of the grid", PipelineService.run_upscale),
    "fit": ("REML fit of the area-level models and EBLUPs", PipelineService.run_fit),
    "bootstrap": ("double parametric bootstrap SEs, CIs and MSEs", PipelineService.run_bootstrap),
    "test": ("Monte Carlo likelihood-ratio test", PipelineService.run_test),
    "simulate": ("write a synthetic scenario", PipelineService.run_simulate),
    "diagnose": ("diagnostic tables and grouped totals", PipelineService.run_diagnose),
}


@dataclass
class CliArgs:
    command: str
    config: Path | None
    overrides: dict[str, Any]
    verbose: bool


def _global_flags(defaults: Any) -> argparse.ArgumentParser:
    # Shared by the top-level parser and every subparser so flags go on either side.
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, default=defaults, help="key=value config file")
    parent.add_argument("--seed", type=int, default=defaults, help="master seed (u64)")
    parent.add_argument("--workers", type=int, default=defaults, help="worker threads")
    parent.add_argument("--out", type=Path, default=defaults, help="output directory")
    parent.add_argument("--crs-note", default=defaults, help="projection note copied to outputs")
    parent.add_argument("-v", "--verbose", action="store_true", default=defaults)
    return parent


def parse_args(argv: list[str] | None = None) -> CliArgs:
    parser = argparse.ArgumentParser(
        prog="saefusion",
        description="Small-area estimation with block-kriged covariates and a spatial FH model.",
        parents=[_global_flags(None)],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {get_version()}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, _) in COMMANDS.items():
        subparsers.add_parser(name, help=help_text, parents=[_global_flags(argparse.SUPPRESS)])
    args = parser.parse_args(argv)
    return CliArgs(
        command=args.command,
        config=args.config,
        overrides={
            "master_seed": args.seed,
            "workers": args.workers,
            "out_dir": args.out,
            "crs_note": args.crs_note,
        },
        verbose=bool(args.verbose),
    )


def _configure_logging(config: PipelineConfig | None, verbose: bool) -> None:
    if verbose:
        level = logging.DEBUG
    elif config is not None:
        level = getattr(logging, config.log_level)
    else:
        level = logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    _configure_logging(None, args.verbose)
    try:
        config = load_config(args.config, **args.overrides)
        _configure_logging(config, args.verbose)
        service = PipelineService(config)
        summary = COMMANDS[args.command][1](service)
    except (ConfigError, InputError) as exc:
        logger.error("%s: %s", exc.code, exc.message)
        return EXIT_INVALID
    except SaeFusionError as exc:
        logger.error("%s: %s", exc.code, exc.message)
        return EXIT_FAILURE
    except Exception as exc:  # pragma: no cover - CLI diagnostics
        logger.error("%s failed: %s", args.command, exc, exc_info=True)
        return EXIT_FAILURE
    for warning in summary.warnings:
        logger.warning(warning)
    if summary.status is CommandStatus.unreliable:
        logger.warning("%s finished but its results are flagged unreliable", args.command)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
