"""Shared plumbing: errors, hashing, and deterministic chunked parallelism."""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np


class NnlmError(Exception):
    """Base class for errors raised by this package."""


class FileFormatError(NnlmError):
    """A binary/text artifact has a bad magic, version, or is truncated."""


class TrainingDivergedError(NnlmError):
    """Training produced a non-finite loss."""


def short_hash(data: bytes) -> int:
    """64-bit content hash used for provenance fields in binary headers."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def file_hash_hex(path: str | os.PathLike) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as f:
        while chunk := f.read(1 << 20):
            h.update(chunk)
    return h.hexdigest()


def array_hash(arr: np.ndarray) -> int:
    return short_hash(np.ascontiguousarray(arr).tobytes())


def default_threads() -> int:
    """Worker cap: NLM_THREADS env var, else 1."""
    try:
        return max(1, int(os.environ.get("NLM_THREADS", "1")))
    except ValueError:
        return 1


T = TypeVar("T")


def map_chunks(fn: Callable[[int], T], n_chunks: int, threads: int | None = None) -> list[T]:
    """Apply ``fn(chunk_index)`` for every chunk and return results in index order.

    Chunk boundaries are fixed by the caller, so results are bit-identical
    regardless of ``threads``; workers only change wall-clock time.
    """
    threads = default_threads() if threads is None else max(1, threads)
    if threads == 1 or n_chunks <= 1:
        return [fn(i) for i in range(n_chunks)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_chunks)))


def chunk_ranges(n: int, chunk: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into fixed-size half-open chunks."""
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


def topk_by_distance(dists: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest distances, ties broken by ascending id.

    Returns positions into ``dists``/``ids`` sorted by (distance, id).
    """
    n = dists.shape[0]
    if k >= n:
        return np.lexsort((ids, dists))
    # argpartition may split a tie group across the pivot; widen the
    # candidate set to everything <= the k-th distance before sorting.
    part = np.argpartition(dists, k - 1)
    kth = dists[part[k - 1]]
    cand = np.flatnonzero(dists <= kth)
    order = np.lexsort((ids[cand], dists[cand]))
    return cand[order[:k]]


def stable_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
