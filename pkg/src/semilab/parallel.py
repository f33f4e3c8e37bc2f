"""Thread-count resolution and order-preserving parallel maps.

The environment variable SEMILAB_THREADS (or the --threads flag) caps the
worker count; single-thread mode is the one under which byte-exact
reproducibility is guaranteed, although results are assembled in input
order regardless of scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "SEMILAB_THREADS"


def resolve_threads(explicit: int | None = None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get(ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


def map_ordered(fn, items, threads: int) -> list:
    """Apply ``fn`` to each item, results in input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
