"""Shared small helpers."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "MIXFEM_THREADS"


def default_threads() -> int:
    """Worker cap from the environment, defaulting to 1."""
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn, items, threads: int = 1) -> list:
    """Map preserving input order; results are independent of ``threads``.

    Tasks must be pure; exceptions propagate.  ``threads <= 1`` runs the
    plain sequential loop.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
