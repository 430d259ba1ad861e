"""Worker-pool sizing and a chunked map for embarrassingly parallel loops.

The pool is capped by the TORIFANO_THREADS environment variable; everything
routed through here stays read-only on shared state, so threads are safe.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Pool size: min(cpu count, TORIFANO_THREADS), at least 1."""
    cap = os.environ.get("TORIFANO_THREADS")
    n = os.cpu_count() or 1
    if cap is not None:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            n = 1
    return max(1, n)


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Map fn over items, fanning out to the worker pool when it pays off."""
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


def chunk_indices(total: int, chunks: int) -> list[range]:
    """Split range(total) into at most `chunks` contiguous pieces."""
    chunks = max(1, min(chunks, total)) if total else 1
    step = -(-total // chunks) if total else 1
    return [range(i, min(i + step, total)) for i in range(0, total, step)]
