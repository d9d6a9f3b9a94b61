"""Reproducible reductions used by several modules.

Two flavours are provided:

* ``blocked_sum`` / ``blocked_gram`` split rows into fixed-size blocks and
  combine block partials with a fixed pairwise tree. The tree depends only on
  the row count and the block size, so the result is bit-identical for any
  number of worker threads.
* ``order_free_mean`` is additionally independent of row order. It subtracts
  the column-wise minimum (an order-free reference) and sums the sorted
  offsets, so permuting rows cannot change a single bit of the output.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

DEFAULT_BLOCK_ROWS = 4096


def _map_blocks(fn: Callable[[int, int], np.ndarray], n: int, block_rows: int,
                threads: int) -> list[np.ndarray]:
    bounds = [(s, min(s + block_rows, n)) for s in range(0, n, block_rows)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda b: fn(*b), bounds))
    return [fn(s, e) for s, e in bounds]


def _tree_combine(parts: list[np.ndarray]) -> np.ndarray:
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def blocked_sum(x: np.ndarray, block_rows: int = DEFAULT_BLOCK_ROWS,
                threads: int = 1) -> np.ndarray:
    """Column sums of ``x`` with a thread-count independent reduction tree."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return np.zeros(x.shape[1:], dtype=np.float64)
    parts = _map_blocks(lambda s, e: x[s:e].sum(axis=0), x.shape[0], block_rows, threads)
    return _tree_combine(parts)


def blocked_gram(x: np.ndarray, block_rows: int = DEFAULT_BLOCK_ROWS,
                 threads: int = 1) -> np.ndarray:
    """``x.T @ x`` accumulated over fixed row blocks."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    if x.shape[0] == 0:
        return np.zeros((d, d), dtype=np.float64)

    def gram(s: int, e: int) -> np.ndarray:
        b = np.ascontiguousarray(x[s:e])
        return b.T @ b

    return _tree_combine(_map_blocks(gram, x.shape[0], block_rows, threads))


def order_free_mean(x: np.ndarray) -> np.ndarray:
    """Column mean that is exactly invariant to row permutation.

    Columns whose entries are bit-identical return that value unchanged,
    including the sign of zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("order_free_mean needs a non-empty 2-d array")
    ref = x.min(axis=0)
    offsets = np.sort(x - ref, axis=0)
    mean = ref + offsets.sum(axis=0) / x.shape[0]
    bits = x.view(np.uint64)
    same = np.all(bits == bits[0], axis=0)
    return np.where(same, x[0], mean)


def float_sort_keys(values: np.ndarray) -> np.ndarray:
    """Map float64 values to uint64 keys whose unsigned order is numeric order.

    -0.0 and +0.0 map to distinct adjacent keys; NaN is not supported.
    """
    bits = np.ascontiguousarray(values, dtype=np.float64).view(np.uint64)
    sign = bits >> np.uint64(63)
    flip = np.where(sign == 1, np.uint64(0xFFFFFFFFFFFFFFFF), np.uint64(1 << 63))
    return bits ^ flip


def keys_to_float(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.uint64)
    top = keys >> np.uint64(63)
    flip = np.where(top == 1, np.uint64(1 << 63), np.uint64(0xFFFFFFFFFFFFFFFF))
    return (keys ^ flip).view(np.float64)
