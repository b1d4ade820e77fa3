"""Key-value datastore: one (context representation, next token) pair per
corpus token, plus the shared binary format for datastores and eval traces.

Keys are stored at full float32 precision; any quantization happens in the
search index, never here. Loading memory-maps the key matrix, so a
datastore much larger than RAM can still be re-ranked against exactly.

Binary layout (little-endian), magic ``NLMD``:

    4s magic | u32 version | u32 dim | u64 count | u8 mode
    u8 tap id (255 = external/unknown) | u64 model hash | u64 corpus hash
    keys:   count * dim * f32, row-major
    values: count * u32
    mode 1 (eval trace) appends:
        logp:  count * f32   (natural-log base-LM probability of the value)
        u64 doc count, then doc count * u64 document start offsets

Mode 0 is a datastore, mode 1 an eval trace. The same layout is the
ingestion contract for externally computed context embeddings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .corpus import TokenSequence, WindowSpec, windows_matrix
from .neural_lm import DEFAULT_TAP, FfLmModel, KeyTap, extract_keys_batch, target_logp_batch
from .util import FileFormatError, NnlmError

_MAGIC = b"NLMD"
_VERSION = 1
_HEADER_FMT = "<4sIIQBBQQ"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)

_TAP_IDS = {tap: i for i, tap in enumerate(KeyTap)}
_TAP_FROM_ID = {i: tap for tap, i in _TAP_IDS.items()}
_TAP_EXTERNAL = 255

MODE_DATASTORE = 0
MODE_EVAL_TRACE = 1


@dataclass(frozen=True)
class Provenance:
    tap: KeyTap | None
    model_hash: int
    corpus_hash: int

    @classmethod
    def external(cls) -> "Provenance":
        return cls(tap=None, model_hash=0, corpus_hash=0)


@dataclass
class Datastore:
    keys: np.ndarray  # (N, d) float32, possibly a memmap
    values: np.ndarray  # (N,) uint32
    provenance: Provenance = Provenance.external()

    def __post_init__(self):
        if self.keys.ndim != 2:
            raise NnlmError("keys must be a (N, d) matrix")
        if len(self.keys) != len(self.values):
            raise NnlmError("keys and values must pair up")

    @property
    def count(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


@dataclass
class EvalTrace:
    """Per-position records sufficient to score interpolated perplexity
    without re-running the base LM: key, target, base log-probability."""

    keys: np.ndarray  # (N, d) float32
    targets: np.ndarray  # (N,) uint32
    logp_lm: np.ndarray  # (N,) float (float64 fresh, float32 after file IO)
    doc_offsets: np.ndarray  # (D,) int64 document starts, like TokenSequence
    provenance: Provenance = Provenance.external()

    def __post_init__(self):
        if np.any(self.logp_lm > 0):
            raise NnlmError("log-probabilities must be <= 0")
        if not np.all(np.isfinite(self.logp_lm)):
            raise NnlmError("log-probabilities must be finite")

    @property
    def count(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def doc_ids(self) -> np.ndarray:
        out = np.zeros(self.count, dtype=np.int64)
        offs = self.doc_offsets[self.doc_offsets < self.count]
        out[offs[1:]] = 1
        return np.cumsum(out)

    def base_perplexity(self) -> float:
        return float(np.exp(-np.mean(self.logp_lm.astype(np.float64))))


def build_datastore(
    model: FfLmModel,
    seq: TokenSequence,
    spec: WindowSpec | None = None,
    tap: KeyTap = DEFAULT_TAP,
) -> Datastore:
    """One (key, value) entry per token of ``seq``, in corpus order."""
    spec = spec or WindowSpec(model.config.context_len)
    if spec.context_len != model.config.context_len:
        raise NnlmError("window width does not match model context_len")
    ctx, targets = windows_matrix(seq, spec)
    if len(targets) == 0:
        keys = np.empty((0, model.key_dim), dtype=np.float32)
    else:
        keys = extract_keys_batch(model, ctx, tap)
    prov = Provenance(tap=tap, model_hash=model.content_hash(), corpus_hash=seq.content_hash())
    return Datastore(keys=keys, values=targets.astype(np.uint32), provenance=prov)


def subsample(ds: Datastore, m: int, seed: int) -> Datastore:
    """Uniform sample of ``m`` entries without replacement (pairs preserved)."""
    if not 0 < m <= ds.count:
        raise NnlmError(f"subsample size {m} out of range 1..{ds.count}")
    rng = np.random.default_rng(seed)
    pick = rng.choice(ds.count, size=m, replace=False)
    return Datastore(
        keys=np.ascontiguousarray(ds.keys[pick]),
        values=np.ascontiguousarray(ds.values[pick]),
        provenance=ds.provenance,
    )


def _pack_header(dim: int, count: int, mode: int, prov: Provenance) -> bytes:
    tap_id = _TAP_IDS[prov.tap] if prov.tap is not None else _TAP_EXTERNAL
    return struct.pack(
        _HEADER_FMT, _MAGIC, _VERSION, dim, count, mode, tap_id, prov.model_hash, prov.corpus_hash
    )


def _read_header(f, path):
    head = f.read(HEADER_SIZE)
    if len(head) != HEADER_SIZE:
        raise FileFormatError(f"{path}: truncated header")
    magic, version, dim, count, mode, tap_id, model_hash, corpus_hash = struct.unpack(_HEADER_FMT, head)
    if magic != _MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    if mode not in (MODE_DATASTORE, MODE_EVAL_TRACE):
        raise FileFormatError(f"{path}: unknown mode {mode}")
    prov = Provenance(tap=_TAP_FROM_ID.get(tap_id), model_hash=model_hash, corpus_hash=corpus_hash)
    return dim, count, mode, prov


def save_datastore(ds: Datastore, path) -> None:
    with open(path, "wb") as f:
        f.write(_pack_header(ds.dim, ds.count, MODE_DATASTORE, ds.provenance))
        np.ascontiguousarray(ds.keys, dtype="<f4").tofile(f)
        np.ascontiguousarray(ds.values, dtype="<u4").tofile(f)


def load_datastore(path) -> Datastore:
    with open(path, "rb") as f:
        dim, count, mode, prov = _read_header(f, path)
        if mode != MODE_DATASTORE:
            raise FileFormatError(f"{path}: expected a datastore file, found an eval trace")
    _check_size(path, HEADER_SIZE + 4 * count * dim + 4 * count)
    keys = np.memmap(path, dtype="<f4", mode="r", offset=HEADER_SIZE, shape=(count, dim))
    values = np.memmap(path, dtype="<u4", mode="r", offset=HEADER_SIZE + 4 * count * dim, shape=(count,))
    return Datastore(keys=keys, values=values, provenance=prov)


def save_trace(trace: EvalTrace, path) -> None:
    with open(path, "wb") as f:
        f.write(_pack_header(trace.dim, trace.count, MODE_EVAL_TRACE, trace.provenance))
        np.ascontiguousarray(trace.keys, dtype="<f4").tofile(f)
        np.ascontiguousarray(trace.targets, dtype="<u4").tofile(f)
        np.ascontiguousarray(trace.logp_lm, dtype="<f4").tofile(f)
        f.write(struct.pack("<Q", len(trace.doc_offsets)))
        np.ascontiguousarray(trace.doc_offsets, dtype="<u8").tofile(f)


def load_trace(path) -> EvalTrace:
    with open(path, "rb") as f:
        dim, count, mode, prov = _read_header(f, path)
        if mode != MODE_EVAL_TRACE:
            raise FileFormatError(f"{path}: expected an eval trace, found a datastore")
        keys = _read_array(f, path, "<f4", count * dim).reshape(count, dim)
        targets = _read_array(f, path, "<u4", count)
        logp = _read_array(f, path, "<f4", count)
        (n_docs,) = struct.unpack("<Q", f.read(8))
        doc_offsets = _read_array(f, path, "<u8", n_docs).astype(np.int64)
    return EvalTrace(keys=keys, targets=targets, logp_lm=logp, doc_offsets=doc_offsets, provenance=prov)


def import_trace(path, expect_dim: int | None = None) -> Datastore | EvalTrace:
    """Load either file mode; rejects files whose key width does not match
    an existing index/datastore dimension."""
    with open(path, "rb") as f:
        dim, _, mode, _ = _read_header(f, path)
    if expect_dim is not None and dim != expect_dim:
        raise NnlmError(f"{path}: key dim {dim} does not match expected {expect_dim}")
    return load_datastore(path) if mode == MODE_DATASTORE else load_trace(path)


def _read_array(f, path, dtype, count) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    buf = f.read(itemsize * count)
    if len(buf) != itemsize * count:
        raise FileFormatError(f"{path}: truncated body")
    return np.frombuffer(buf, dtype=dtype).copy()


def _check_size(path, expected: int) -> None:
    import os

    actual = os.path.getsize(path)
    if actual != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes, found {actual}")
