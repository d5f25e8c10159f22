"""Worker-count policy for the few places that fan out independent jobs."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "CURRICUIDS_THREADS"


def worker_count() -> int:
    """``CURRICUIDS_THREADS`` if set to a positive integer, else the machine's CPU count."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            n = 0
        if n > 0:
            return n
    return os.cpu_count() or 1


def map_ordered(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """``[fn(x) for x in items]``, threaded when more than one worker is allowed.

    Results come back in input order, so callers that seed each job
    independently get the same output for any worker count.
    """
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
