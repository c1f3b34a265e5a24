"""Worker-count control for the compiled parallel kernels."""

from __future__ import annotations

import os
from contextlib import contextmanager

import numba


def max_workers() -> int:
    return numba.config.NUMBA_NUM_THREADS


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, max_workers()))


@contextmanager
def worker_threads(workers: int | None):
    """Run the enclosed kernels on ``workers`` threads (thread-local setting)."""
    if workers is None:
        yield
        return
    workers = max(1, min(int(workers), max_workers()))
    prev = numba.get_num_threads()
    numba.set_num_threads(workers)
    try:
        yield
    finally:
        numba.set_num_threads(prev)
