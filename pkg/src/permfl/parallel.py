"""Thread-pool helper honoring the PERM_THREADS cap."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    """Worker-thread cap: PERM_THREADS if set, else hardware parallelism."""
    raw = os.environ.get("PERM_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(f"PERM_THREADS must be an integer, got {raw!r}") from exc
    else:
        n = os.cpu_count() or 1
    return max(1, n)


def pmap(fn, items):
    """Map fn over items, preserving order. Results never depend on the pool size."""
    items = list(items)
    n = thread_count()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
