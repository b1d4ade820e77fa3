"""Word-level corpora: vocabulary, encoding, document-aware context windows.

Text is whitespace-tokenized; a blank line separates documents. Every token
position yields exactly one fixed-width context window; positions near a
document start are left-padded with BOS so contexts never leak across
document boundaries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .util import FileFormatError, NnlmError

UNK_TOKEN = "<unk>"
BOS_TOKEN = "<bos>"
UNK_ID = 0
BOS_ID = 1

_TOKENS_MAGIC = b"NLMT"
_TOKENS_VERSION = 1


@dataclass(frozen=True)
class Vocab:
    """Dense token <-> id mapping with ids 0 (UNK) and 1 (BOS) reserved."""

    tokens: tuple[str, ...]
    counts: tuple[int, ...]
    _index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if not self._index:
            object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok, cnt in zip(self.tokens, self.counts):
                f.write(f"{tok}\t{cnt}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens: list[str] = []
        counts: list[int] = []
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    tok, cnt = line.split("\t")
                except ValueError as e:
                    raise FileFormatError(f"{path}: bad vocab line {line_no}") from e
                tokens.append(tok)
                counts.append(int(cnt))
        if len(tokens) < 2 or tokens[0] != UNK_TOKEN or tokens[1] != BOS_TOKEN:
            raise FileFormatError(f"{path}: lines 0/1 must be the {UNK_TOKEN}/{BOS_TOKEN} sentinels")
        return cls(tokens=tuple(tokens), counts=tuple(counts))


@dataclass(frozen=True)
class TokenSequence:
    """Encoded corpus: token ids plus sorted document start offsets."""

    ids: np.ndarray  # uint32
    doc_offsets: np.ndarray  # int64, strictly increasing, doc_offsets[0] == 0

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.uint32))
        object.__setattr__(self, "doc_offsets", np.asarray(self.doc_offsets, dtype=np.int64))
        n = len(self.ids)
        offs = self.doc_offsets
        if n == 0:
            if len(offs) != 0:
                raise NnlmError("empty sequence cannot have documents")
            return
        if len(offs) == 0 or offs[0] != 0:
            raise NnlmError("doc_offsets must start at 0")
        if np.any(np.diff(offs) <= 0) or offs[-1] >= n:
            raise NnlmError("doc_offsets must be strictly increasing and < length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_docs(self) -> int:
        return len(self.doc_offsets)

    def doc_bounds(self) -> list[tuple[int, int]]:
        """Half-open (start, end) per document."""
        offs = self.doc_offsets
        ends = np.append(offs[1:], len(self.ids))
        return [(int(s), int(e)) for s, e in zip(offs, ends)]

    def doc_of(self, position: int) -> int:
        """Index of the document containing ``position``."""
        return int(np.searchsorted(self.doc_offsets, position, side="right") - 1)

    def doc_ids(self) -> np.ndarray:
        """Per-position document index, shape (len,)."""
        out = np.zeros(len(self.ids), dtype=np.int64)
        out[self.doc_offsets[1:]] = 1
        return np.cumsum(out)

    def content_hash(self) -> int:
        from .util import short_hash

        return short_hash(self.ids.astype("<u4").tobytes() + self.doc_offsets.astype("<u8").tobytes())

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(struct.pack("<4sIQQ", _TOKENS_MAGIC, _TOKENS_VERSION, len(self.ids), self.n_docs))
            f.write(self.ids.astype("<u4").tobytes())
            f.write(self.doc_offsets.astype("<u8").tobytes())

    @classmethod
    def load(cls, path) -> "TokenSequence":
        with open(path, "rb") as f:
            header = f.read(struct.calcsize("<4sIQQ"))
            if len(header) != struct.calcsize("<4sIQQ"):
                raise FileFormatError(f"{path}: truncated token file header")
            magic, version, n_tokens, n_docs = struct.unpack("<4sIQQ", header)
            if magic != _TOKENS_MAGIC:
                raise FileFormatError(f"{path}: bad magic {magic!r}")
            if version != _TOKENS_VERSION:
                raise FileFormatError(f"{path}: unsupported token file version {version}")
            id_bytes = f.read(4 * n_tokens)
            off_bytes = f.read(8 * n_docs)
            if len(id_bytes) != 4 * n_tokens or len(off_bytes) != 8 * n_docs:
                raise FileFormatError(f"{path}: truncated token file body")
            ids = np.frombuffer(id_bytes, dtype="<u4")
            offs = np.frombuffer(off_bytes, dtype="<u8")
        return cls(ids=ids.astype(np.uint32), doc_offsets=offs.astype(np.int64))


@dataclass(frozen=True)
class WindowSpec:
    """Fixed context width with BOS padding left of document starts."""

    context_len: int
    pad: int = BOS_ID

    def __post_init__(self):
        if self.context_len < 1:
            raise NnlmError("context_len must be >= 1")


def _iter_token_lines(text: Iterable[str] | str) -> Iterator[str]:
    if isinstance(text, str):
        yield from text.split("\n")
    else:
        for line in text:
            yield line.rstrip("\n")


def build_vocab(text: Iterable[str] | str, min_count: int = 1, max_size: int = 1 << 31) -> Vocab:
    """Count whitespace tokens and keep the ``max_size - 2`` most frequent.

    Tokens below ``min_count`` or beyond the size cap map to UNK at encode
    time; their mass is recorded on the UNK sentinel. Ordering is by
    descending count, ties broken lexicographically, for determinism.
    """
    if min_count < 1:
        raise NnlmError("min_count must be >= 1")
    if max_size < 2:
        raise NnlmError("max_size must leave room for UNK and BOS")
    counts: dict[str, int] = {}
    for line in _iter_token_lines(text):
        for tok in line.split():
            counts[tok] = counts.get(tok, 0) + 1
    counts.pop(UNK_TOKEN, None)
    counts.pop(BOS_TOKEN, None)
    if not counts:
        raise NnlmError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [(t, c) for t, c in ranked if c >= min_count][: max_size - 2]
    dropped = sum(counts.values()) - sum(c for _, c in kept)
    tokens = (UNK_TOKEN, BOS_TOKEN) + tuple(t for t, _ in kept)
    vocab_counts = (dropped, 0) + tuple(c for _, c in kept)
    return Vocab(tokens=tokens, counts=vocab_counts)


def encode(text: Iterable[str] | str, vocab: Vocab) -> TokenSequence:
    """Encode whitespace tokens to ids; blank lines start a new document."""
    ids: list[int] = []
    doc_offsets: list[int] = []
    at_boundary = True
    for line in _iter_token_lines(text):
        toks = line.split()
        if not toks:
            at_boundary = True
            continue
        if at_boundary:
            doc_offsets.append(len(ids))
            at_boundary = False
        ids.extend(vocab.id_of(t) for t in toks)
    return TokenSequence(
        ids=np.array(ids, dtype=np.uint32),
        doc_offsets=np.array(doc_offsets, dtype=np.int64),
    )


def decode(seq: TokenSequence, vocab: Vocab) -> str:
    """Inverse of :func:`encode` modulo UNK replacement and line layout:
    one line per document, blank lines between documents."""
    docs = []
    for start, end in seq.doc_bounds():
        docs.append(" ".join(vocab.token_of(int(i)) for i in seq.ids[start:end]))
    return "\n\n".join(docs)


def windows_matrix(seq: TokenSequence, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """All context windows at once: (N, n) int32 contexts and (N,) int32 targets.

    Row t is the ``n`` ids preceding position t within its document,
    left-padded with the pad id. One row per token.
    """
    n = spec.context_len
    total = len(seq)
    ctx = np.full((total, n), spec.pad, dtype=np.int32)
    targets = seq.ids.astype(np.int32)
    for start, end in seq.doc_bounds():
        length = end - start
        doc = seq.ids[start:end].astype(np.int32)
        padded = np.concatenate([np.full(n, spec.pad, dtype=np.int32), doc])
        # window for position start+t is padded[t : t+n]
        win = np.lib.stride_tricks.sliding_window_view(padded, n)[:length]
        ctx[start:end] = win
    return ctx, targets


def iter_windows(seq: TokenSequence, spec: WindowSpec) -> Iterator[tuple[np.ndarray, int, int]]:
    """Yield (context, target, position) for every token position."""
    ctx, targets = windows_matrix(seq, spec)
    for pos in range(len(seq)):
        yield ctx[pos], int(targets[pos]), pos
