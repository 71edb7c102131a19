"""Thread fan-out capped by the RANKAUDIT_THREADS environment variable.

Results always come back in input order, so callers stay deterministic no
matter how work is scheduled.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

THREADS_ENV = "RANKAUDIT_THREADS"

_T = TypeVar("_T")
_R = TypeVar("_R")


def thread_count() -> int:
    """Worker cap from the environment; defaults to single-threaded."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def ordered_map(fn: Callable[[_T], _R], items: Sequence[_T] | Iterable[_T]) -> list[_R]:
    """Apply ``fn`` across ``items``, in parallel when allowed, keeping order."""
    items = list(items)
    workers = min(thread_count(), max(len(items), 1))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
