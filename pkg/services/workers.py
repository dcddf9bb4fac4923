"""
Thread pool helper used wherever independent fits or chunks can run side by side.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import psutil

# Настройка логирования
logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: Optional[int] = None) -> int:
    """
    Resolves the worker count.

    Args:
        threads: Requested count, None for the number of available cores.

    Returns:
        int: A count of at least 1.
    """
    if threads is not None:
        return max(1, int(threads))
    cores = psutil.cpu_count(logical=True)
    return max(1, cores or 1)


def parallel_map(func: Callable[[T], R], items: Iterable[T], threads: Optional[int] = 1) -> List[R]:
    """
    Order-preserving map over items, on a thread pool when threads > 1.

    Exceptions raised by func propagate to the caller.
    """
    items = list(items)
    workers = min(resolve_threads(threads), max(1, len(items)))
    if workers == 1:
        return [func(item) for item in items]
    logger.debug(f"parallel_map: {len(items)} tasks on {workers} threads")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
