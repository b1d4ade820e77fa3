"""Approximate nearest-neighbor search built from scratch: k-means coarse
quantizer, inverted lists, product quantization with asymmetric distance
lookup tables, optional exact re-ranking, and a brute-force oracle.

Distance math runs in float64 against float32 stored tensors. Ties are
broken by lowest index everywhere, so a fixed seed yields a bit-identical
index and searches are deterministic at any thread count.

The quantized search path reports L2 (not squared) distances; exact paths
(re-ranking and the oracle default) report squared L2. The metric tag
travels with the results so downstream probability code uses whatever the
search actually produced.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

import numpy as np

from .datastore import Datastore
from .util import FileFormatError, NnlmError, chunk_ranges, map_chunks, topk_by_distance

_INDEX_MAGIC = b"NLMI"
_INDEX_VERSION = 1

# Large-scale reference defaults; desk_scale() shrinks them for small N.
REFERENCE_N_CENTROIDS = 4096
REFERENCE_NPROBE = 32
REFERENCE_K = 1024
REFERENCE_TRAIN_SAMPLE = 1_000_000


class Metric(enum.Enum):
    L2 = "l2"
    SQUARED_L2 = "squared_l2"


class Rerank(enum.Enum):
    NONE = "none"
    EXACT = "exact"


@dataclass(frozen=True)
class IndexConfig:
    n_centroids: int = REFERENCE_N_CENTROIDS
    pq_m: int | None = None  # None: derived so subvectors are ~16 dims wide
    pq_bits: int = 8  # fixed 8-bit codes, 256 codewords per subquantizer
    train_sample_size: int = REFERENCE_TRAIN_SAMPLE
    kmeans_iters: int = 25
    seed: int = 0

    def resolve_pq_m(self, dim: int) -> int:
        if self.pq_m is not None:
            if dim % self.pq_m != 0:
                raise NnlmError(f"dim {dim} not divisible by pq_m {self.pq_m}")
            return self.pq_m
        return default_pq_m(dim)


def default_pq_m(dim: int) -> int:
    """Divisor of ``dim`` giving subvectors closest to 16 dims (ties favor
    more subquantizers). dim=1024 gives 64 one-byte codes."""
    divisors = [m for m in range(1, dim + 1) if dim % m == 0]
    return min(divisors, key=lambda m: (abs(dim / m - 16.0), -m))


def desk_scale(cfg: IndexConfig, n_entries: int) -> tuple[IndexConfig, list[str]]:
    """Shrink reference parameters for corpora far below the scale they
    were tuned at. Returns the adjusted config and human-readable notices."""
    notices = []
    out = cfg
    if n_entries < 1_000_000 and cfg.n_centroids == REFERENCE_N_CENTROIDS:
        scaled = max(16, int(np.ceil(np.sqrt(n_entries))))
        if scaled < cfg.n_centroids:
            out = replace(out, n_centroids=scaled)
            notices.append(f"desk scale: n_centroids {cfg.n_centroids} -> {scaled} for {n_entries} entries")
    if out.train_sample_size > n_entries:
        out = replace(out, train_sample_size=n_entries)
        notices.append(f"desk scale: train_sample_size capped at {n_entries}")
    return out, notices


@dataclass(frozen=True)
class SearchParams:
    k: int = REFERENCE_K
    nprobe: int = REFERENCE_NPROBE
    rerank: Rerank = Rerank.EXACT

    def __post_init__(self):
        if self.k < 1:
            raise NnlmError("k must be >= 1")
        if self.nprobe < 1:
            raise NnlmError("nprobe must be >= 1")


@dataclass
class NeighborSet:
    """Up to k (entry id, value, distance) triples, ascending by distance,
    ties by ascending entry id."""

    entry_ids: np.ndarray  # int64
    values: np.ndarray  # int64 token ids
    distances: np.ndarray  # float64, in the tagged metric
    metric: Metric

    def __len__(self) -> int:
        return len(self.entry_ids)


@dataclass
class IvfPqIndex:
    config: IndexConfig
    dim: int
    count: int
    centroids: np.ndarray  # (C, d) float32
    codebooks: np.ndarray  # (m, 256, d/m) float32
    list_ids: list[np.ndarray]  # per centroid, ascending entry ids (int64)
    list_codes: list[np.ndarray]  # per centroid, (len, m) uint8

    @property
    def n_centroids(self) -> int:
        return self.centroids.shape[0]

    @property
    def pq_m(self) -> int:
        return self.codebooks.shape[0]

    def save(self, path) -> None:
        c = self.config
        with open(path, "wb") as f:
            f.write(
                struct.pack(
                    "<4sIIIIQIQIQ",
                    _INDEX_MAGIC, _INDEX_VERSION,
                    self.n_centroids, self.pq_m, c.pq_bits,
                    c.train_sample_size, c.kmeans_iters, c.seed,
                    self.dim, self.count,
                )
            )
            np.ascontiguousarray(self.centroids, "<f4").tofile(f)
            np.ascontiguousarray(self.codebooks, "<f4").tofile(f)
            for ids, codes in zip(self.list_ids, self.list_codes):
                f.write(struct.pack("<Q", len(ids)))
                np.ascontiguousarray(ids, "<u8").tofile(f)
                f.write(np.ascontiguousarray(codes, np.uint8).tobytes())

    @classmethod
    def load(cls, path) -> "IvfPqIndex":
        fmt = "<4sIIIIQIQIQ"
        with open(path, "rb") as f:
            head = f.read(struct.calcsize(fmt))
            if len(head) != struct.calcsize(fmt):
                raise FileFormatError(f"{path}: truncated index header")
            magic, version, n_cent, m, bits, sample, iters, seed, dim, count = struct.unpack(fmt, head)
            if magic != _INDEX_MAGIC:
                raise FileFormatError(f"{path}: bad magic {magic!r}")
            if version != _INDEX_VERSION:
                raise FileFormatError(f"{path}: unsupported index version {version}")
            cfg = IndexConfig(
                n_centroids=n_cent, pq_m=m, pq_bits=bits,
                train_sample_size=sample, kmeans_iters=iters, seed=seed,
            )
            centroids = _read(f, path, "<f4", n_cent * dim).reshape(n_cent, dim)
            codebooks = _read(f, path, "<f4", m * 256 * (dim // m)).reshape(m, 256, dim // m)
            list_ids, list_codes = [], []
            for _ in range(n_cent):
                raw = f.read(8)
                if len(raw) != 8:
                    raise FileFormatError(f"{path}: truncated list header")
                (length,) = struct.unpack("<Q", raw)
                list_ids.append(_read(f, path, "<u8", length).astype(np.int64))
                list_codes.append(_read(f, path, np.uint8, length * m).reshape(length, m))
        return cls(cfg, dim, count, centroids, codebooks, list_ids, list_codes)


def _read(f, path, dtype, count) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    buf = f.read(itemsize * count)
    if len(buf) != itemsize * count:
        raise FileFormatError(f"{path}: truncated index body")
    return np.frombuffer(buf, dtype=dtype).copy()


# ---------------------------------------------------------------------------
# k-means and product quantization trainers
# ---------------------------------------------------------------------------


def _sqdist_to_centroids(points64: np.ndarray, centroids64: np.ndarray) -> np.ndarray:
    """(N, C) squared L2 via the expansion trick, clipped at 0."""
    p2 = np.einsum("ij,ij->i", points64, points64)
    c2 = np.einsum("ij,ij->i", centroids64, centroids64)
    d = p2[:, None] + c2[None, :] - 2.0 * points64 @ centroids64.T
    return np.maximum(d, 0.0, out=d)


def assign_to_centroids(points: np.ndarray, centroids: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Nearest-centroid index per point (ties break to the lowest index)."""
    c64 = np.asarray(centroids, dtype=np.float64)
    out = np.empty(len(points), dtype=np.int64)
    for lo, hi in chunk_ranges(len(points), chunk):
        d = _sqdist_to_centroids(np.asarray(points[lo:hi], np.float64), c64)
        out[lo:hi] = np.argmin(d, axis=1)
    return out


def _kmeans_plus_plus(points64: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points64)
    centroids = np.empty((k, points64.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points64[first]
    min_d = np.einsum("ij,ij->i", points64 - centroids[0], points64 - centroids[0])
    for j in range(1, k):
        total = min_d.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))  # all points coincide with centroids
        else:
            pick = int(rng.choice(n, p=min_d / total))
        centroids[j] = points64[pick]
        diff = points64 - centroids[j]
        np.minimum(min_d, np.einsum("ij,ij->i", diff, diff), out=min_d)
    return centroids


def train_kmeans(points: np.ndarray, k: int, iters: int = 25, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are repaired by splitting the largest cluster at its
    farthest member. Stops early at an assignment fixpoint. Deterministic
    in the seed; returns (k, d) float32 centroids.
    """
    points = np.asarray(points)
    n, d = points.shape
    if k > n:
        raise NnlmError(f"k={k} exceeds {n} points")
    points64 = points.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(points64, k, rng)

    prev_assign: np.ndarray | None = None
    for _ in range(iters):
        assign = assign_to_centroids(points64, centroids)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        counts = np.bincount(assign, minlength=k)
        sums = np.empty_like(centroids)
        for j in range(d):
            sums[:, j] = np.bincount(assign, weights=points64[:, j], minlength=k)
        nonzero = counts > 0
        centroids[nonzero] = sums[nonzero] / counts[nonzero, None]

        for empty in np.flatnonzero(~nonzero):
            largest = int(np.argmax(counts))
            if counts[largest] < 2:
                continue  # nothing splittable; keep the stale centroid
            members = np.flatnonzero(assign == largest)
            diffs = points64[members] - centroids[largest]
            far = members[int(np.argmax(np.einsum("ij,ij->i", diffs, diffs)))]
            centroids[empty] = points64[far]
            assign[far] = empty
            counts[largest] -= 1
            counts[empty] = 1
            if counts[largest] > 0:
                centroids[largest] = (sums[largest] - points64[far]) / counts[largest]
        prev_assign = assign
    return centroids.astype(np.float32)


def train_pq(points: np.ndarray, m: int, iters: int = 25, seed: int = 0) -> np.ndarray:
    """Per-subvector 256-codeword k-means; returns (m, 256, d/m) float32."""
    points = np.asarray(points)
    n, d = points.shape
    if d % m != 0:
        raise NnlmError(f"dim {d} not divisible by m={m}")
    if n < 256:
        raise NnlmError(f"product quantization needs >= 256 training rows, got {n}")
    width = d // m
    codebooks = np.empty((m, 256, width), dtype=np.float32)
    for j in range(m):
        codebooks[j] = train_kmeans(points[:, j * width: (j + 1) * width], 256, iters, seed + j)
    return codebooks


def encode_pq(codebooks: np.ndarray, vectors: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """(N, m) uint8 codes: per subvector, the index of the nearest codeword."""
    vectors = np.atleast_2d(vectors)
    m, _, width = codebooks.shape
    codes = np.empty((len(vectors), m), dtype=np.uint8)
    for lo, hi in chunk_ranges(len(vectors), chunk):
        for j in range(m):
            sub = np.asarray(vectors[lo:hi, j * width: (j + 1) * width], np.float64)
            d = _sqdist_to_centroids(sub, codebooks[j].astype(np.float64))
            codes[lo:hi, j] = np.argmin(d, axis=1)
    return codes


def decode_pq(codebooks: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Reconstruct vectors by concatenating the coded codewords."""
    codes = np.atleast_2d(codes)
    m, _, width = codebooks.shape
    out = np.empty((len(codes), m * width), dtype=np.float32)
    for j in range(m):
        out[:, j * width: (j + 1) * width] = codebooks[j][codes[:, j]]
    return out


# ---------------------------------------------------------------------------
# index build and search
# ---------------------------------------------------------------------------


def build_index(ds: Datastore, cfg: IndexConfig | None = None, threads: int | None = None) -> IvfPqIndex:
    """Train the coarse and product quantizers on a key sample, then file
    every entry under its nearest centroid with its PQ code."""
    cfg = cfg or IndexConfig()
    if ds.count == 0:
        raise NnlmError("cannot index an empty datastore")
    m = cfg.resolve_pq_m(ds.dim)
    if cfg.n_centroids < 1:
        raise NnlmError("n_centroids must be >= 1")
    sample_size = min(cfg.train_sample_size, ds.count)
    if sample_size < cfg.n_centroids:
        raise NnlmError("train_sample_size must be >= n_centroids")

    rng = np.random.default_rng(cfg.seed)
    sample_idx = np.sort(rng.choice(ds.count, size=sample_size, replace=False))
    sample = np.asarray(ds.keys[sample_idx], dtype=np.float32)

    centroids = train_kmeans(sample, cfg.n_centroids, cfg.kmeans_iters, cfg.seed)
    codebooks = train_pq(sample, m, cfg.kmeans_iters, cfg.seed + 1)

    chunk = 65536
    spans = chunk_ranges(ds.count, chunk)

    def encode_span(i: int):
        lo, hi = spans[i]
        block = np.asarray(ds.keys[lo:hi], np.float32)
        return assign_to_centroids(block, centroids), encode_pq(codebooks, block)

    parts = map_chunks(encode_span, len(spans), threads)
    assign = np.concatenate([p[0] for p in parts]) if parts else np.empty(0, np.int64)
    codes = np.concatenate([p[1] for p in parts]) if parts else np.empty((0, m), np.uint8)

    list_ids, list_codes = [], []
    for c in range(cfg.n_centroids):
        ids = np.flatnonzero(assign == c)
        list_ids.append(ids.astype(np.int64))
        list_codes.append(codes[ids])
    return IvfPqIndex(
        config=replace(cfg, pq_m=m),
        dim=ds.dim, count=ds.count,
        centroids=centroids, codebooks=codebooks,
        list_ids=list_ids, list_codes=list_codes,
    )


def _probe_order(index: IvfPqIndex, queries64: np.ndarray, nprobe: int) -> np.ndarray:
    """(Q, nprobe) centroid ids per query, ranked by squared L2, tie->id."""
    d = _sqdist_to_centroids(queries64, index.centroids.astype(np.float64))
    out = np.empty((len(queries64), nprobe), dtype=np.int64)
    cent_ids = np.arange(index.n_centroids)
    for qi in range(len(queries64)):
        pos = topk_by_distance(d[qi], cent_ids, nprobe)
        out[qi] = pos
    return out


def _adc_lut(codebooks: np.ndarray, query64: np.ndarray) -> np.ndarray:
    """(m, 256) squared-L2 lookup table between query subvectors and codewords."""
    m, _, width = codebooks.shape
    lut = np.empty((m, 256), dtype=np.float64)
    for j in range(m):
        diff = codebooks[j].astype(np.float64) - query64[j * width: (j + 1) * width]
        lut[j] = np.einsum("ij,ij->i", diff, diff)
    return lut


def _search_one(index: IvfPqIndex, ds: Datastore, query: np.ndarray, params: SearchParams, probes: np.ndarray) -> NeighborSet:
    cand_ids = np.concatenate([index.list_ids[c] for c in probes])
    if len(cand_ids) == 0:
        return NeighborSet(
            entry_ids=np.empty(0, np.int64), values=np.empty(0, np.int64),
            distances=np.empty(0, np.float64),
            metric=Metric.SQUARED_L2 if params.rerank is Rerank.EXACT else Metric.L2,
        )
    q64 = np.asarray(query, np.float64)
    if params.rerank is Rerank.EXACT:
        cand_keys = np.asarray(ds.keys[cand_ids], np.float64)
        diff = cand_keys - q64
        dists = np.einsum("ij,ij->i", diff, diff)
        metric = Metric.SQUARED_L2
    else:
        lut = _adc_lut(index.codebooks, q64)
        cand_codes = np.concatenate([index.list_codes[c] for c in probes])
        dists = np.sqrt(lut[np.arange(index.pq_m)[None, :], cand_codes].sum(axis=1))
        metric = Metric.L2
    sel = topk_by_distance(dists, cand_ids, params.k)
    ids = cand_ids[sel]
    return NeighborSet(
        entry_ids=ids,
        values=np.asarray(ds.values[ids], np.int64),
        distances=dists[sel],
        metric=metric,
    )


def search(index: IvfPqIndex, ds: Datastore, query: np.ndarray, params: SearchParams) -> NeighborSet:
    """Probe the nprobe nearest inverted lists and score candidates: by
    quantized asymmetric distance (reported as plain L2), or, with exact
    re-ranking, by full-precision squared L2 over the whole probed union."""
    return search_batch(index, ds, np.atleast_2d(query), params)[0]


def search_batch(
    index: IvfPqIndex, ds: Datastore, queries: np.ndarray, params: SearchParams, threads: int | None = None
) -> list[NeighborSet]:
    queries = np.atleast_2d(queries)
    if queries.shape[1] != index.dim or index.dim != ds.dim:
        raise NnlmError("query/index/datastore dimensions disagree")
    if index.count != ds.count:
        raise NnlmError("index was not built over this datastore")
    if params.nprobe > index.n_centroids:
        raise NnlmError(f"nprobe {params.nprobe} exceeds {index.n_centroids} centroids")
    probes = _probe_order(index, queries.astype(np.float64), params.nprobe)
    spans = chunk_ranges(len(queries), 1024)

    def run_span(i: int):
        lo, hi = spans[i]
        return [_search_one(index, ds, queries[qi], params, probes[qi]) for qi in range(lo, hi)]

    parts = map_chunks(run_span, len(spans), threads)
    return [ns for part in parts for ns in part]


def exact_search(ds: Datastore, query: np.ndarray, k: int, metric: Metric = Metric.SQUARED_L2) -> NeighborSet:
    """Brute-force oracle: full scan at full precision."""
    if ds.count == 0:
        raise NnlmError("cannot search an empty datastore")
    q64 = np.asarray(query, np.float64).reshape(-1)
    dists = np.empty(ds.count, dtype=np.float64)
    for lo, hi in chunk_ranges(ds.count, 262144):
        diff = np.asarray(ds.keys[lo:hi], np.float64) - q64
        dists[lo:hi] = np.einsum("ij,ij->i", diff, diff)
    if metric is Metric.L2:
        np.sqrt(dists, out=dists)
    ids = np.arange(ds.count, dtype=np.int64)
    sel = topk_by_distance(dists, ids, k)
    return NeighborSet(
        entry_ids=ids[sel],
        values=np.asarray(ds.values[ids[sel]], np.int64),
        distances=dists[sel],
        metric=metric,
    )


def recall_at_k(approx: NeighborSet, exact: NeighborSet, k: int) -> float:
    """Fraction of the true k nearest that the approximate search returned."""
    truth = set(exact.entry_ids[:k].tolist())
    got = set(approx.entry_ids[:k].tolist())
    return len(truth & got) / max(len(truth), 1)
