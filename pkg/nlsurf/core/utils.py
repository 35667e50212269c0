"""Shared utilities: settings, logging setup and the worker pool."""
import logging
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Callable, Iterable, List, Optional, TypeVar

from pydantic_settings import BaseSettings, SettingsConfigDict

T = TypeVar("T")
R = TypeVar("R")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class Settings(BaseSettings):
    """Process-wide settings read from ``NLSURF_*`` environment variables."""

    model_config = SettingsConfigDict(env_prefix="NLSURF_")

    log_level: str = "INFO"
    threads: int = 1
    default_tol: float = 1e-3
    output_dir: str = "reports"
    seed: int = 0


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Get the cached settings instance.

    Returns:
        Settings: Settings built from the environment or defaults.
    """
    return Settings()


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for the whole package.

    Args:
        level: Log level name. If None, uses NLSURF_LOG_LEVEL or INFO.
    """
    level_name = (level or get_settings().log_level).upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO), format=LOG_FORMAT)
    logging.getLogger("nlsurf").setLevel(getattr(logging, level_name, logging.INFO))


def parallel_map(
    func: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None
) -> List[R]:
    """Map ``func`` over ``items`` keeping input order.

    Args:
        func: Function applied to each item.
        items: Items to process.
        threads: Worker count. If None, uses the configured default; 1 runs serially.

    Returns:
        List: Results in the order of ``items``.
    """
    items = list(items)
    workers = threads if threads is not None else get_settings().threads
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
