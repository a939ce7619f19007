"""Order-preserving parallel map capped by ``TREECUT_THREADS``."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

from .errors import InvalidParameterError

T = TypeVar("T")
R = TypeVar("R")


def thread_count(threads: int | None = None) -> int:
    """Resolve a thread count; ``None`` reads ``TREECUT_THREADS`` and 0 means auto."""
    if threads is None:
        raw = os.environ.get("TREECUT_THREADS", "0").strip() or "0"
        try:
            threads = int(raw)
        except ValueError:
            raise InvalidParameterError(f"TREECUT_THREADS must be an integer, got {raw!r}") from None
    if threads < 0:
        raise InvalidParameterError("thread count must be >= 0")
    if threads == 0:
        threads = os.cpu_count() or 1
    return threads


def pmap(fn: Callable[[T], R], items: Sequence[T], threads: int | None = None) -> list[R]:
    """``[fn(x) for x in items]``, possibly on a thread pool; result order is fixed."""
    n = thread_count(threads)
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
