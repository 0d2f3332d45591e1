"""Order-preserving parallel map used by the experiment sweeps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(func: Callable[[T], R], items: Iterable[T], *, threads: int = 1) -> List[R]:
    """Apply ``func`` to every item and return results in input order.

    Work items must be independent; numpy releases the GIL inside the heavy
    kernels so threads give real speedups on the sampling sweeps.
    """

    work = list(items)
    if threads <= 1 or len(work) <= 1:
        return [func(item) for item in work]
    with ThreadPoolExecutor(max_workers=min(threads, len(work))) as pool:
        return list(pool.map(func, work))


__all__ = ["ordered_map"]
