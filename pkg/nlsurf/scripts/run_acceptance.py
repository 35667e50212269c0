"""Script to run every JSON fixture under configs/ through dispatch and print a summary."""
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from nlsurf.app.config import load_run_config
from nlsurf.app.main import apply_overrides, dispatch
from nlsurf.core.errors import ConfigError
from nlsurf.core.utils import configure_logging

# Default configuration
DEFAULT_CONFIG = {
    "config_dir": "configs",
    "out_dir": "reports/acceptance",
    "threads": 1,
}

# Fixtures that must fail their checks; everything else must pass.
EXPECTED_EXIT: Dict[str, int] = {
    "certify_over_singular.json": 1,
}


def run_fixture(path: Path, out_root: Path, threads: Optional[int] = None) -> Tuple[int, float]:
    """Dispatch one fixture into ``out_root/<stem>``.

    Returns:
        Tuple: Exit status and wall time in seconds.
    """
    start = time.perf_counter()
    try:
        cfg = apply_overrides(load_run_config(path), out=str(out_root / path.stem), threads=threads)
    except ConfigError as e:
        print(f"  {path.name}: {e}")
        return 2, time.perf_counter() - start
    return dispatch(cfg), time.perf_counter() - start


def run_suite(config_dir: Path, out_root: Path, threads: Optional[int] = None) -> List[Tuple[str, int, int, float]]:
    """Run all fixtures in name order.

    Returns:
        List: (fixture, expected exit, actual exit, seconds) per fixture.
    """
    results = []
    for path in sorted(Path(config_dir).glob("*.json")):
        print(f"Running {path.name}...")
        code, seconds = run_fixture(path, out_root, threads)
        results.append((path.name, EXPECTED_EXIT.get(path.name, 0), code, seconds))
    return results


def print_summary(results: List[Tuple[str, int, int, float]]) -> bool:
    """Print one line per fixture; True when every exit status is the expected one."""
    print("\nAcceptance summary")
    print("=" * 60)
    ok = True
    for name, expected, code, seconds in results:
        status = "ok" if code == expected else "MISMATCH"
        ok = ok and code == expected
        print(f"{name:<40} exit {code} (want {expected}) {seconds:7.1f}s  {status}")
    print("=" * 60)
    print(f"{sum(1 for r in results if r[1] == r[2])}/{len(results)} fixtures as expected")
    return ok


def start_acceptance():
    """Entry point of the ``run-acceptance`` script."""
    configure_logging()
    config_dir = Path(DEFAULT_CONFIG["config_dir"])
    if not config_dir.is_dir():
        print(f"No fixture directory at {config_dir.resolve()}")
        sys.exit(2)
    results = run_suite(config_dir, Path(DEFAULT_CONFIG["out_dir"]), int(DEFAULT_CONFIG["threads"]))
    sys.exit(0 if results and print_summary(results) else 1)


if __name__ == "__main__":
    start_acceptance()
