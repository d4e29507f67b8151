"""Deterministic chunked execution.

Work is split into chunks whose boundaries depend only on the problem size,
never on the worker count, and partial results are combined in chunk order.
Results are therefore bit-identical for any number of threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")

_threads: int = os.cpu_count() or 1


def set_threads(n: int | None) -> int:
    """Cap the worker count; ``None`` or ``0`` restores hardware parallelism."""
    global _threads
    if n is None or n <= 0:
        _threads = os.cpu_count() or 1
    else:
        _threads = int(n)
    return _threads


def get_threads() -> int:
    return _threads


def chunk_bounds(n: int, chunk: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


def map_chunks(fn: Callable[[int, int], T], n: int, chunk: int) -> list[T]:
    """Apply ``fn(lo, hi)`` over fixed chunks of ``range(n)``, results in order."""
    bounds = chunk_bounds(n, max(1, chunk))
    if _threads <= 1 or len(bounds) <= 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=min(_threads, len(bounds))) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))
