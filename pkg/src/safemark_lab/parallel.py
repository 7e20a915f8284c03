"""Order-preserving parallel map capped by ``SAFEMARK_LAB_THREADS``."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "SAFEMARK_LAB_THREADS"


def worker_count() -> int:
    raw = os.environ.get(ENV_VAR)
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = max(1, int(raw))
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    return cap


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Results come back in input order regardless of completion order."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
