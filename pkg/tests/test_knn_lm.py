"""Distribution laws for the neighbor softmax, interpolation, and cache."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnlm.ann_index import Metric, NeighborSet
from nnlm.knn_lm import (
    DEFAULT_LAMBDA_GRID,
    CacheConfig,
    cache_distribution,
    cache_target_probability,
    combine_three,
    interpolate,
    knn_distribution,
    knn_target_probability,
    neighbor_shares,
    tune_lambda,
    tune_lambda_joint,
)
from nnlm.util import NnlmError


def make_neighbors(dists, values, metric=Metric.SQUARED_L2):
    n = len(dists)
    return NeighborSet(
        entry_ids=np.arange(n, dtype=np.int64),
        values=np.asarray(values, dtype=np.int64),
        distances=np.asarray(dists, dtype=np.float64),
        metric=metric,
    )


class TestKnnDistribution:
    def test_single_neighbor(self):
        d = knn_distribution(make_neighbors([0.0], [7]))
        assert d[7] == pytest.approx(1.0, abs=1e-15)

    def test_two_equidistant(self):
        d = knn_distribution(make_neighbors([0.0, 0.0], [3, 5]))
        assert d[3] == pytest.approx(0.5, abs=1e-15)
        assert d[5] == pytest.approx(0.5, abs=1e-15)

    def test_log_three_distance(self):
        # exp(-ln 3) = 1/3, so masses are 1 : 1/3 -> 0.75 / 0.25
        d = knn_distribution(make_neighbors([0.0, np.log(3)], [3, 9]))
        assert d[3] == pytest.approx(0.75, abs=1e-12)
        assert d[9] == pytest.approx(0.25, abs=1e-12)

    def test_mass_aggregates_across_occurrences(self):
        d = knn_distribution(make_neighbors([0.0, 0.0, 0.0, 0.0], [4, 4, 4, 6]))
        assert d[4] == pytest.approx(0.75, abs=1e-12)

    def test_absent_token_zero(self):
        d = knn_distribution(make_neighbors([0.1, 0.2], [3, 9]))
        assert d[1234] == 0.0

    def test_empty_rejected(self):
        with pytest.raises(NnlmError):
            knn_distribution(make_neighbors([], []))

    @given(
        dists=st.lists(st.floats(0, 50), min_size=1, max_size=40),
        seed=st.integers(0, 1000),
    )
    @settings(max_examples=100, deadline=None)
    def test_normalization_and_shift_invariance(self, dists, seed):
        rng = np.random.default_rng(seed)
        values = rng.integers(0, 12, len(dists))
        ns = make_neighbors(dists, values)
        d = knn_distribution(ns)
        assert d.total() == pytest.approx(1.0, abs=1e-9)
        shifted = knn_distribution(make_neighbors(np.asarray(dists) + 17.5, values))
        for tok, p in d.probs.items():
            assert shifted[tok] == pytest.approx(p, abs=1e-12)

    def test_target_fast_path_matches_distribution(self):
        rng = np.random.default_rng(1)
        ns = make_neighbors(rng.uniform(0, 10, 30), rng.integers(0, 8, 30))
        d = knn_distribution(ns)
        for tok in range(8):
            assert knn_target_probability(ns, tok) == pytest.approx(d[tok], abs=1e-12)

    def test_neighbor_shares_sum_to_one(self):
        rng = np.random.default_rng(2)
        ns = make_neighbors(rng.uniform(0, 5, 11), rng.integers(0, 4, 11))
        assert neighbor_shares(ns).sum() == pytest.approx(1.0, abs=1e-12)


class TestInterpolate:
    def test_lambda_zero_identity(self):
        assert interpolate(0.124, 0.998, 0.0) == 0.124

    def test_lambda_one_identity(self):
        assert interpolate(0.124, 0.998, 1.0) == 0.998

    def test_quarter_mix(self):
        # 0.25 * 0.998 + 0.75 * 0.124
        assert interpolate(0.124, 0.998, 0.25) == pytest.approx(0.3425, abs=1e-12)

    @given(
        p_lm=st.floats(0, 1), p_knn=st.floats(0, 1), lam=st.floats(0, 1)
    )
    @settings(max_examples=200)
    def test_result_between_inputs(self, p_lm, p_knn, lam):
        out = interpolate(p_lm, p_knn, lam)
        assert min(p_lm, p_knn) - 1e-12 <= out <= max(p_lm, p_knn) + 1e-12

    def test_dense_distributions_stay_normalized(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.dirichlet(np.ones(50))
            b = rng.dirichlet(np.ones(50))
            lam = rng.uniform()
            mixed = lam * a + (1 - lam) * b
            assert mixed.sum() == pytest.approx(1.0, abs=1e-9)
            assert (mixed >= 0).all()


class TestTuneLambda:
    def test_perfect_knn_takes_max_grid(self):
        logp_lm = np.full(30, -2.0)
        p_knn = np.ones(30)
        lam, ppl = tune_lambda(logp_lm, p_knn)
        assert lam == DEFAULT_LAMBDA_GRID[-1] == 0.99
        assert ppl < np.exp(2.0)

    def test_useless_knn_takes_zero(self):
        logp_lm = np.full(30, -1.0)
        p_knn = np.zeros(30)
        lam, ppl = tune_lambda(logp_lm, p_knn)
        assert lam == 0.0
        assert ppl == pytest.approx(np.e, rel=1e-12)

    def test_matches_bruteforce_grid_oracle(self):
        rng = np.random.default_rng(4)
        logp_lm = -rng.uniform(0.1, 4.0, 200)
        p_knn = rng.uniform(0, 1, 200)
        lam, ppl = tune_lambda(logp_lm, p_knn)
        # one-off direct evaluation of every grid point
        best = min(
            (float(np.exp(-np.log(g * p_knn + (1 - g) * np.exp(logp_lm)).mean())), g)
            for g in DEFAULT_LAMBDA_GRID
        )
        assert ppl == pytest.approx(best[0], rel=1e-12)
        assert lam == best[1]

    def test_never_worse_than_base(self):
        rng = np.random.default_rng(5)
        logp_lm = -rng.uniform(0.1, 4.0, 100)
        p_knn = rng.uniform(0, 1, 100)
        _, ppl = tune_lambda(logp_lm, p_knn)
        assert ppl <= np.exp(-logp_lm.mean()) + 1e-12

    def test_tie_prefers_smaller_lambda(self):
        logp_lm = np.log(np.full(10, 0.5))
        p_knn = np.full(10, 0.5)  # all lambdas identical
        lam, _ = tune_lambda(logp_lm, p_knn)
        assert lam == 0.0


class TestCache:
    def test_single_entry(self):
        key = np.ones(4)
        p = cache_distribution(np.ones((1, 4)), np.array([9]), key, CacheConfig())
        assert p[9] == pytest.approx(1.0, abs=1e-15)

    def test_theta_to_zero_gives_window_unigram(self):
        rng = np.random.default_rng(6)
        hist = rng.normal(size=(3, 8))
        toks = np.array([2, 2, 5])
        p = cache_distribution(hist, toks, rng.normal(size=8), CacheConfig(theta=1e-6))
        assert p[2] == pytest.approx(2 / 3, abs=1e-4)
        assert p[5] == pytest.approx(1 / 3, abs=1e-4)

    def test_log_two_gap(self):
        # inner products s and s - ln 2 at theta=1 give weights 1 : 1/2
        key = np.array([1.0, 0.0])
        s = 0.8
        hist = np.array([[s, 0.0], [s - np.log(2), 0.0]])
        p = cache_distribution(hist, np.array([3, 4]), key, CacheConfig(theta=1.0))
        assert p[3] == pytest.approx(2 / 3, abs=1e-12)
        assert p[4] == pytest.approx(1 / 3, abs=1e-12)

    def test_window_truncation(self):
        key = np.zeros(2)
        hist = np.zeros((10, 2))
        toks = np.array([1] * 9 + [2])
        p = cache_distribution(hist, toks, key, CacheConfig(window=2, theta=1.0))
        assert p[1] == pytest.approx(0.5, abs=1e-12)
        assert p[2] == pytest.approx(0.5, abs=1e-12)

    def test_empty_history_rejected(self):
        with pytest.raises(NnlmError):
            cache_distribution(np.zeros((0, 3)), np.array([]), np.zeros(3), CacheConfig())

    def test_target_fast_path(self):
        rng = np.random.default_rng(7)
        hist = rng.normal(size=(20, 5))
        toks = rng.integers(0, 6, 20)
        key = rng.normal(size=5)
        cfg = CacheConfig(window=16, theta=0.7)
        d = cache_distribution(hist, toks, key, cfg)
        for tok in range(6):
            assert cache_target_probability(hist, toks, key, tok, cfg) == pytest.approx(d[tok], abs=1e-12)


class TestCombineThree:
    def test_all_zero_lambdas(self):
        assert combine_three(0.1, 0.5, 0.3, 0.0, 0.0) == pytest.approx(0.1, abs=1e-15)

    def test_lambda_one_is_knn(self):
        assert combine_three(0.1, 0.5, 0.3, 1.0, 0.7) == pytest.approx(0.5, abs=1e-15)

    def test_two_stage_arithmetic(self):
        # 0.25*0.5 + 0.75*(0.2*0.3 + 0.8*0.1) = 0.23
        assert combine_three(0.1, 0.5, 0.3, 0.25, 0.2) == pytest.approx(0.23, abs=1e-12)

    def test_joint_tuning_matches_oracle(self):
        rng = np.random.default_rng(8)
        logp_lm = -rng.uniform(0.1, 3.0, 150)
        p_knn = rng.uniform(0, 1, 150)
        p_cache = rng.uniform(0, 1, 150)
        grid = (0.0, 0.3, 0.7)
        lam, clam, ppl = tune_lambda_joint(logp_lm, p_knn, p_cache, grid, grid)
        p_lm = np.exp(logp_lm)
        best = min(
            (float(np.exp(-np.log(g * p_knn + (1 - g) * (c * p_cache + (1 - c) * p_lm)).mean())), g, c)
            for g in grid
            for c in grid
        )
        assert ppl == pytest.approx(best[0], rel=1e-12)
        assert (lam, clam) == (best[1], best[2])
