"""Deterministic shard-and-merge helpers.

Work is split into contiguous shards of a canonically ordered input, mapped
on a thread pool, and the shard results are returned in shard order. Callers
merge with associative, commutative operations (integer sums, set unions) or
concatenate in shard order, so results never depend on ``threads``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def shards(items: Sequence[T], n: int) -> list[Sequence[T]]:
    n = max(1, min(n, len(items))) if items else 1
    size, extra = divmod(len(items), n)
    out, start = [], 0
    for i in range(n):
        stop = start + size + (1 if i < extra else 0)
        out.append(items[start:stop])
        start = stop
    return out


def map_shards(func: Callable[[Sequence[T]], R], items: Sequence[T], threads: int = 1) -> list[R]:
    parts = shards(items, threads)
    if threads <= 1 or len(parts) == 1:
        return [func(p) for p in parts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, parts))
