"""Bounded, order-preserving thread fan-out for per-control-point loops."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")


def max_threads(requested: int | None = None) -> int:
    """Effective worker count: explicit request, else VMATFLUX_THREADS, else cores."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("VMATFLUX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def map_ordered(fn: Callable[[int], T], n: int, threads: int | None = None) -> list[T]:
    """[fn(0), ..., fn(n-1)] with at most `threads` concurrent calls.

    Results are assembled in index order so callers stay deterministic
    regardless of scheduling; batching bounds the number of results in
    flight (per-CP arrays can be large).
    """
    return list(imap_ordered(fn, n, threads))


def imap_ordered(fn: Callable[[int], T], n: int, threads: int | None = None):
    """Like map_ordered but yields results as batches finish.

    Lets callers fold large per-index arrays into an accumulator without
    ever holding all n of them.
    """
    workers = max_threads(threads)
    if workers <= 1 or n <= 1:
        for i in range(n):
            yield fn(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, n, workers):
            yield from pool.map(fn, range(start, min(start + workers, n)))
