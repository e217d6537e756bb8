"""Order-preserving map over independent evaluations.

Thread count comes from ``MOEI2_THREADS`` (default 1, i.e. serial). Results
are returned in input order so reductions do not depend on scheduling.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("MOEI2_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    items = list(items)
    workers = n_threads()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
