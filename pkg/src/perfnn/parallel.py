"""Worker-count setting shared by the parallelizable stages.

Results never depend on the worker count: work is split into fixed chunks
and reassembled in order.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_threads = None


def set_threads(n) -> None:
    global _threads
    if n is not None and n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = n


def get_threads() -> int:
    return _threads or os.cpu_count() or 1


def pmap(fn, items):
    items = list(items)
    n = min(get_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
