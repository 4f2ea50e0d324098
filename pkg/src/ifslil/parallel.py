"""Ordered chunk-parallel map.

Work is always split into the same fixed-size chunks; the worker count only
changes who computes a chunk, never what it computes or the order results are
folded in.  Outputs are therefore identical for any thread count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

_threads = 1


def set_threads(n: int) -> int:
    """Set the worker count; 0 picks the CPU count.  Returns the value in force."""
    global _threads
    _threads = (os.cpu_count() or 1) if n == 0 else max(1, int(n))
    return _threads


def get_threads() -> int:
    return _threads


def chunk_ranges(total: int, size: int) -> list[tuple[int, int]]:
    return [(a, min(a + size, total)) for a in range(0, total, size)]


def map_ordered(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    if _threads == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(fn, items))
