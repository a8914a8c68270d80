"""Thread fan-out with results in input order.

Work is cut into fixed-size blocks that do not depend on the thread count and
partial results are merged in block order, so every output is bitwise
identical for any number of threads.
"""

import logging
import os
from collections.abc import Callable, Iterable, Iterator
from typing import TypeVar

from joblib import Parallel, delayed

logger = logging.getLogger(__name__)

THREADS_ENV = "OCCKIT_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(requested: int | None = None) -> int:
    if requested is None:
        env = os.environ.get(THREADS_ENV, "").strip()
        if env:
            try:
                requested = int(env)
            except ValueError:
                logger.warning("ignoring non-integer %s=%r", THREADS_ENV, env)
    if requested is None or requested <= 0:
        requested = os.cpu_count() or 1
    return int(requested)


def blocks(n: int, block_size: int) -> list[tuple[int, int]]:
    return [(start, min(n, start + block_size)) for start in range(0, n, block_size)]


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> Iterator[R]:
    items = list(items)
    n_jobs = min(resolve_threads(threads), max(1, len(items)))
    if n_jobs == 1:
        return (fn(it) for it in items)
    logger.debug("running %d blocks on %d threads", len(items), n_jobs)
    return Parallel(n_jobs=n_jobs, backend="threading", return_as="generator")(
        delayed(fn)(it) for it in items
    )
