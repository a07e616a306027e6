"""Index-ordered parallel map.

Work is split into contiguous chunks, but results always come back in
sample-index order, so any reduction the caller performs afterwards does
not depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")

THREADS_ENV = "XPLIKA_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def ordered_map(fn: Callable[[int], T], n: int, min_chunk: int = 64) -> list[T]:
    """Evaluate ``fn(i)`` for ``i in range(n)`` and return the results in order."""
    workers = min(worker_count(), max(1, n // min_chunk))
    if workers <= 1:
        return [fn(i) for i in range(n)]
    bounds = [n * k // workers for k in range(workers + 1)]

    def run(k: int) -> list[T]:
        return [fn(i) for i in range(bounds[k], bounds[k + 1])]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts: Sequence[list[T]] = list(pool.map(run, range(workers)))
    return [item for part in parts for item in part]
