from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")

# Fixed so that chunk boundaries (and hence results) never depend on worker count.
CHUNK = 64


def chunked_map(fn: Callable[[int, int], list[T]], n: int, workers: int = 1, chunk: int = CHUNK) -> list[T]:
    """Apply ``fn(start, stop)`` over ``range(n)`` in fixed chunks, concatenating in order."""
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if workers <= 1 or len(bounds) <= 1:
        parts = [fn(a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), bounds))
    out: list[T] = []
    for p in parts:
        out.extend(p)
    return out
