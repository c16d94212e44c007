"""Worker-count control and deterministic chunked execution.

Work is always cut into chunks whose boundaries depend only on the problem
size, never on the number of workers. Workers only decide *who* runs a
chunk, so results are bit-identical for any worker count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence, Tuple, TypeVar

T = TypeVar("T")

ENV_THREADS = "RAILSEG_THREADS"

_override: int | None = None


def set_num_workers(n: int | None) -> None:
    """Force a worker count for this process (``None`` restores env/auto)."""
    global _override
    if n is not None and n < 0:
        raise ValueError(f"worker count must be >= 0, got {n}")
    _override = n


def num_workers() -> int:
    n = _override
    if n is None:
        raw = os.environ.get(ENV_THREADS, "0").strip() or "0"
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def chunk_ranges(total: int, chunk: int) -> List[Tuple[int, int]]:
    """Fixed-size half-open ranges covering ``[0, total)``."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    return [(lo, min(lo + chunk, total)) for lo in range(0, total, chunk)]


def run_chunks(fn: Callable[[T], None], chunks: Sequence[T], workers: int | None = None) -> None:
    """Run ``fn`` over every chunk, possibly concurrently.

    ``fn`` must write into disjoint output regions; nothing is returned.
    """
    workers = num_workers() if workers is None else workers
    if workers <= 1 or len(chunks) <= 1:
        for c in chunks:
            fn(c)
        return
    with ThreadPoolExecutor(max_workers=min(workers, len(chunks))) as pool:
        # list() re-raises the first worker exception
        list(pool.map(fn, chunks))


def map_ordered(fn: Callable[[T], object], items: Iterable[T], workers: int | None = None) -> list:
    items = list(items)
    workers = num_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
