"""Optional thread parallelism, capped by the KERNELICL_THREADS variable."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    """Parallelism cap from KERNELICL_THREADS; 0 or unset means sequential."""
    raw = os.environ.get("KERNELICL_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def map_ordered(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Apply fn to independent items, results in input order.

    Thread results are collected positionally, so the output is identical
    to the sequential computation.
    """
    workers = thread_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
