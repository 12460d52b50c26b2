"""Ordered process-pool map used by every per-patient stage."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # not linux
        return max(1, os.cpu_count() or 1)


def _call_capturing(fn, item):
    try:
        return True, fn(item)
    except Exception as exc:  # noqa: BLE001 - handed back to the caller
        return False, exc


def map_ordered(
    fn: Callable[[T], R],
    items: Iterable[T],
    workers: int = 1,
    return_exceptions: bool = False,
) -> list:
    """Apply ``fn`` to every item; results come back in input order.

    With ``workers > 1`` items run in a process pool, so ``fn`` and the items
    must be picklable. Output never depends on the worker count.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        outcomes = [_call_capturing(fn, item) for item in items]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
            futures = [pool.submit(_call_capturing, fn, item) for item in items]
            outcomes = [f.result() for f in futures]
    results = []
    for ok, value in outcomes:
        if not ok and not return_exceptions:
            raise value
        results.append(value)
    return results
