"""Order-preserving parallel map used by replication and permutation loops."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable

THREADS_ENV = "PANELCAUSAL_THREADS"


def resolve_threads(threads: int | None = None) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, int(threads or 1))


def pmap(fn: Callable, items: Iterable, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool.

    Results come back in input order, so any reduction the caller does
    afterwards is independent of the worker count.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
