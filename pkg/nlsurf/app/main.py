"""Batch front end: load a run config, dispatch the command, write the reports."""
import argparse
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

from nlsurf.app.commands import COMMANDS
from nlsurf.app.config import RunConfig, load_run_config
from nlsurf.core.engine.reports import CheckRow, Report
from nlsurf.core.errors import ConfigError, NonlocalError
from nlsurf.core.utils import configure_logging

logger = logging.getLogger("nlsurf.main")

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_INPUT = 2


def dispatch(cfg: RunConfig) -> int:
    """Run the command named by ``cfg`` and write ``<command>.csv/.json`` to its output directory.

    Args:
        cfg: Validated run configuration.

    Returns:
        int: 0 when every check passes, 1 on a failed check or a numerical
        error (reported as a failed row), 2 on an unusable configuration.
    """
    out_dir = cfg.out_dir()
    handler = COMMANDS[cfg.command]
    logger.info(f"Running '{cfg.command}' (seed {cfg.seed}, threads {cfg.threads})")
    try:
        report = handler(cfg)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_INPUT
    except NonlocalError as e:
        logger.error(f"'{cfg.command}' failed: {type(e).__name__}: {e}")
        report = Report(command=cfg.command, metadata={"error": str(e)})
        report.add(CheckRow(label=f"error:{type(e).__name__}", value=math.nan, passed=False))
    report.metadata.setdefault("seed", str(cfg.seed))
    paths = report.write(out_dir)
    if report.passed:
        logger.info(f"'{cfg.command}' passed; reports in {paths['csv'].parent}")
        return EXIT_PASS
    failed = ", ".join(r.label for r in report.failures[:5])
    logger.warning(f"'{cfg.command}' failed {len(report.failures)} check(s): {failed}")
    return EXIT_FAIL


def apply_overrides(
    cfg: RunConfig,
    out: Optional[str] = None,
    tol: Optional[float] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
) -> RunConfig:
    """Copy of ``cfg`` with the command-line flags applied; flags win over the file."""
    update = {
        key: value
        for key, value in (("output", out), ("tol", tol), ("seed", seed), ("threads", threads))
        if value is not None
    }
    if not update:
        return cfg
    try:
        return RunConfig.model_validate({**cfg.model_dump(), **update})
    except ValueError as e:
        raise ConfigError(f"Invalid command-line override: {e}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Nonlocal minimal surface computations and checks")
    parser.add_argument("--config", type=Path, required=True, help="JSON run configuration")
    parser.add_argument("--out", type=str, default=None, help="Directory for the CSV/JSON reports")
    parser.add_argument("--tol", type=float, default=None, help="Tolerance override for the command's checks")
    parser.add_argument("--seed", type=int, default=None, help="Seed for sampled quantities")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads for point sweeps")
    parser.add_argument("--log-level", type=str, default=None, help="Log level (default: NLSURF_LOG_LEVEL or INFO)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse flags, load the config and dispatch.

    Args:
        argv: Arguments without the program name. If None, uses sys.argv.

    Returns:
        int: Exit status.
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        cfg = apply_overrides(load_run_config(args.config), args.out, args.tol, args.seed, args.threads)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return dispatch(cfg)


def run_cli() -> None:
    """Console entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run_cli()
