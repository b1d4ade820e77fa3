"""Count-based n-gram LM with interpolated Kneser-Ney smoothing.

A single fixed discount is interpolated against lower-order continuation
distributions, ending in a uniform 1/V base so every token has strictly
positive probability. Continuation counts are taken over interior grams
only (no BOS padding); the top order counts BOS-padded contexts so that
document-initial positions are first-class histories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS_ID, TokenSequence
from .util import NnlmError

Gram = tuple[int, ...]


@dataclass
class NgramModel:
    order: int
    vocab_size: int
    discount: float
    # level -> history tuple -> {word: count}; level == order holds raw
    # counts (continuation counts for order 1), lower levels continuation.
    tables: dict[int, dict[Gram, dict[int, int]]] = field(repr=False, default_factory=dict)
    totals: dict[int, dict[Gram, int]] = field(repr=False, default_factory=dict)

    def prob(self, context: np.ndarray | list[int], target: int) -> float:
        """p(target | last order-1 ids of context), short contexts BOS-padded."""
        hist_len = self.order - 1
        ctx = [int(t) for t in context][-hist_len:] if hist_len else []
        if len(ctx) < hist_len:
            ctx = [BOS_ID] * (hist_len - len(ctx)) + ctx
        return self._level_prob(self.order, tuple(ctx), int(target))

    def _level_prob(self, level: int, hist: Gram, w: int) -> float:
        if level == 0:
            return 1.0 / self.vocab_size
        hist = hist[len(hist) - (level - 1):] if level > 1 else ()
        table = self.tables[level].get(hist)
        if not table:
            return self._level_prob(level - 1, hist[1:] if hist else (), w)
        total = self.totals[level][hist]
        d = self.discount
        discounted = max(table.get(w, 0) - d, 0.0) / total
        backoff_mass = d * len(table) / total
        return discounted + backoff_mass * self._level_prob(level - 1, hist[1:] if hist else (), w)

    def distribution(self, context: np.ndarray | list[int]) -> np.ndarray:
        """Dense conditional distribution, for tests and inspection."""
        return np.array([self.prob(context, w) for w in range(self.vocab_size)])


def train_ngram(seq: TokenSequence, order: int, discount: float = 0.75, vocab_size: int | None = None) -> NgramModel:
    if order < 1:
        raise NnlmError("order must be >= 1")
    if not 0.0 < discount < 1.0:
        raise NnlmError("discount must be in (0, 1)")
    if len(seq) == 0:
        raise NnlmError("empty sequence")
    if vocab_size is None:
        vocab_size = int(seq.ids.max()) + 1

    tables: dict[int, dict[Gram, dict[int, int]]] = {}
    totals: dict[int, dict[Gram, int]] = {}

    docs = [seq.ids[s:e].astype(np.int64).tolist() for s, e in seq.doc_bounds()]

    if order >= 2:
        # top level: raw counts with BOS-padded histories, one gram per token
        top: dict[Gram, dict[int, int]] = {}
        hist_len = order - 1
        for doc in docs:
            padded = [BOS_ID] * hist_len + doc
            for t, w in enumerate(doc):
                hist = tuple(padded[t: t + hist_len])
                bucket = top.setdefault(hist, {})
                bucket[w] = bucket.get(w, 0) + 1
        tables[order] = top
        totals[order] = {h: sum(b.values()) for h, b in top.items()}

    # continuation levels: level j counts distinct left-extensions among
    # interior (j+1)-grams, no padding
    for level in range(order - 1 if order >= 2 else 1, 0, -1):
        gram_len = level + 1
        types: set[Gram] = set()
        for doc in docs:
            for t in range(gram_len - 1, len(doc)):
                types.add(tuple(doc[t - gram_len + 1: t + 1]))
        cont: dict[Gram, dict[int, int]] = {}
        for g in types:
            hist = g[1:-1]
            w = g[-1]
            bucket = cont.setdefault(hist, {})
            bucket[w] = bucket.get(w, 0) + 1
        tables[level] = cont
        totals[level] = {h: sum(b.values()) for h, b in cont.items()}

    return NgramModel(order=order, vocab_size=vocab_size, discount=discount, tables=tables, totals=totals)


def ngram_prob(model: NgramModel, context: np.ndarray | list[int], target: int) -> float:
    return model.prob(context, target)
