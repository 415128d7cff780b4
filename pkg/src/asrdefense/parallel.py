"""Order-preserving fan-out over work chunks."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

WORKERS_ENV = "ASRDEFENSE_WORKERS"


def default_workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def map_chunks(fn: Callable[[T], R], chunks: Iterable[T], workers: int | None = None) -> list[R]:
    """Apply ``fn`` to each chunk; results come back in input order regardless of completion.

    Threads suffice: the heavy lifting is numpy, which releases the GIL.
    """
    chunks = list(chunks)
    workers = workers or default_workers()
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))
