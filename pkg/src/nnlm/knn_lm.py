"""Probabilistic core: neighbor softmax distribution, linear interpolation
with the base LM, mixing-weight tuning, and the continuous-cache comparator.

The neighbor distribution is a softmax over negative retrieval distances
(shifted by the minimum distance for stability), with probability mass
aggregated per vocabulary item; tokens absent from the retrieved targets
get exactly zero mass. Distances are used as tagged by the search that
produced them (plain or squared L2).

Perplexity evaluation only ever needs the probability of the observed
target, so every operation has a scalar fast path next to the full sparse
distribution used for neighbor inspection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ann_index import NeighborSet
from .util import NnlmError

DEFAULT_LAMBDA_GRID = tuple(round(0.05 * i, 2) for i in range(20)) + (0.99,)


@dataclass
class SparseDistribution:
    """Probabilities over a finite support (at most the neighbor count)."""

    probs: dict[int, float]

    def total(self) -> float:
        return float(sum(self.probs.values()))

    def __getitem__(self, token: int) -> float:
        return self.probs.get(int(token), 0.0)


@dataclass(frozen=True)
class InterpolationConfig:
    lam: float | None = None  # None means: tune on the evaluation trace
    grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID

    def __post_init__(self):
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise NnlmError("lambda must be in [0, 1]")
        if list(self.grid) != sorted(self.grid) or not all(0.0 <= g <= 1.0 for g in self.grid):
            raise NnlmError("lambda grid must be sorted within [0, 1]")


@dataclass(frozen=True)
class CacheConfig:
    window: int = 512
    theta: float = 1.0
    cache_lam: float | None = None  # None means: tune jointly

    def __post_init__(self):
        if self.window < 1:
            raise NnlmError("cache window must be >= 1")
        if self.theta <= 0.0:
            raise NnlmError("theta must be > 0")


def _neighbor_weights(distances: np.ndarray) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    return np.exp(-(d - d.min()))


def knn_distribution(neighbors: NeighborSet) -> SparseDistribution:
    """Full sparse next-token distribution from retrieved neighbors."""
    if len(neighbors) == 0:
        raise NnlmError("empty neighbor set")
    w = _neighbor_weights(neighbors.distances)
    total = w.sum()
    values = np.asarray(neighbors.values)
    probs: dict[int, float] = {}
    for tok in np.unique(values):
        probs[int(tok)] = float(w[values == tok].sum() / total)
    return SparseDistribution(probs=probs)


def knn_target_probability(neighbors: NeighborSet, target: int) -> float:
    """p(target) under the neighbor softmax; 0 when absent from retrievals."""
    if len(neighbors) == 0:
        raise NnlmError("empty neighbor set")
    w = _neighbor_weights(neighbors.distances)
    mask = np.asarray(neighbors.values) == int(target)
    return float(w[mask].sum() / w.sum())


def neighbor_shares(neighbors: NeighborSet) -> np.ndarray:
    """Per-neighbor (not per-token) softmax shares, summing to 1."""
    w = _neighbor_weights(neighbors.distances)
    return w / w.sum()


def interpolate(p_lm: float, p_knn: float, lam: float) -> float:
    """lam * p_knn + (1 - lam) * p_lm, in linear probability space."""
    return lam * p_knn + (1.0 - lam) * p_lm


def interpolated_nll(logp_lm: np.ndarray, p_knn: np.ndarray, lam: float) -> float:
    """Mean -ln(lam*p_knn + (1-lam)*p_lm) over a trace, in float64."""
    p_lm = np.exp(np.asarray(logp_lm, dtype=np.float64))
    mixed = lam * np.asarray(p_knn, dtype=np.float64) + (1.0 - lam) * p_lm
    if np.any(mixed <= 0.0):
        raise NnlmError("interpolated probability hit zero; use lambda < 1 when retrieval can miss")
    return float(-np.log(mixed).mean())


def tune_lambda(
    logp_lm: np.ndarray, p_knn: np.ndarray, grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
) -> tuple[float, float]:
    """Grid-search the mixing weight on precomputed target probabilities.

    Returns (best lambda, perplexity at it); ties go to the smaller lambda.
    """
    if len(logp_lm) == 0:
        raise NnlmError("empty trace")
    p_lm = np.exp(np.asarray(logp_lm, dtype=np.float64))
    p_knn = np.asarray(p_knn, dtype=np.float64)
    best_lam, best_nll = None, np.inf
    for lam in grid:
        mixed = lam * p_knn + (1.0 - lam) * p_lm
        if np.any(mixed <= 0.0):
            continue  # lambda=1 with retrieval misses: -inf log-prob
        nll = float(-np.log(mixed).mean())
        if nll < best_nll:
            best_lam, best_nll = lam, nll
    if best_lam is None:
        raise NnlmError("no grid point yields finite perplexity")
    return best_lam, float(np.exp(best_nll))


def cache_scores(history_keys: np.ndarray, current_key: np.ndarray, theta: float) -> np.ndarray:
    """Stable softmax weights over the history by scaled inner product."""
    s = theta * (np.asarray(history_keys, np.float64) @ np.asarray(current_key, np.float64))
    return np.exp(s - s.max())


def cache_distribution(
    history_keys: np.ndarray,
    history_tokens: np.ndarray,
    current_key: np.ndarray,
    cfg: CacheConfig,
) -> SparseDistribution:
    """Distribution over tokens seen earlier in the current document,
    weighted by hidden-state similarity; history is truncated to the last
    ``cfg.window`` entries."""
    history_keys = np.atleast_2d(history_keys)[-cfg.window:]
    history_tokens = np.asarray(history_tokens)[-cfg.window:]
    if len(history_tokens) == 0:
        raise NnlmError("empty cache history")
    w = cache_scores(history_keys, current_key, cfg.theta)
    total = w.sum()
    probs: dict[int, float] = {}
    for tok in np.unique(history_tokens):
        probs[int(tok)] = float(w[history_tokens == tok].sum() / total)
    return SparseDistribution(probs=probs)


def cache_target_probability(
    history_keys: np.ndarray,
    history_tokens: np.ndarray,
    current_key: np.ndarray,
    target: int,
    cfg: CacheConfig,
) -> float:
    history_keys = np.atleast_2d(history_keys)[-cfg.window:]
    history_tokens = np.asarray(history_tokens)[-cfg.window:]
    if len(history_tokens) == 0:
        raise NnlmError("empty cache history")
    w = cache_scores(history_keys, current_key, cfg.theta)
    return float(w[history_tokens == int(target)].sum() / w.sum())


def combine_three(p_lm: float, p_knn: float, p_cache: float, lam: float, cache_lam: float) -> float:
    """Two-stage mix: cache folds into the base LM first, then the neighbor
    distribution interpolates on top."""
    base = cache_lam * p_cache + (1.0 - cache_lam) * p_lm
    return lam * p_knn + (1.0 - lam) * base


def tune_lambda_joint(
    logp_lm: np.ndarray,
    p_knn: np.ndarray,
    p_cache: np.ndarray,
    grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID,
    cache_grid: tuple[float, ...] | None = None,
) -> tuple[float, float, float]:
    """Joint grid search over (lambda, cache lambda).

    Returns (lambda, cache lambda, perplexity); ties prefer smaller
    (lambda, cache lambda) in lexicographic order.
    """
    cache_grid = grid if cache_grid is None else cache_grid
    p_lm = np.exp(np.asarray(logp_lm, dtype=np.float64))
    p_knn = np.asarray(p_knn, dtype=np.float64)
    p_cache = np.asarray(p_cache, dtype=np.float64)
    best = None
    for lam in grid:
        for clam in cache_grid:
            mixed = lam * p_knn + (1.0 - lam) * (clam * p_cache + (1.0 - clam) * p_lm)
            if np.any(mixed <= 0.0):
                continue
            nll = float(-np.log(mixed).mean())
            if best is None or nll < best[2]:
                best = (lam, clam, nll)
    if best is None:
        raise NnlmError("no grid point yields finite perplexity")
    return best[0], best[1], float(np.exp(best[2]))
