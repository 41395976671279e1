from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_default_threads = 1


def set_default_threads(threads: int | None) -> None:
    global _default_threads
    _default_threads = max_threads() if threads is None else max(1, int(threads))


def default_threads() -> int:
    return _default_threads


def max_threads() -> int:
    return os.cpu_count() or 1


def split(n: int, threads: int) -> list[slice]:
    """Contiguous chunks of ``range(n)``, at most ``threads`` of them."""
    threads = max(1, min(threads, n))
    bounds = [n * i // threads for i in range(threads + 1)]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def map_chunks(fn, n: int, threads: int | None = None) -> list:
    """Apply ``fn(slice)`` to contiguous chunks of ``range(n)``, results in order.

    Callers reduce the returned partials in list order, so the result does not
    depend on scheduling.
    """
    threads = default_threads() if threads is None else threads
    chunks = split(n, threads)
    if len(chunks) <= 1:
        return [fn(c) for c in chunks] if chunks else []
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(fn, chunks))
