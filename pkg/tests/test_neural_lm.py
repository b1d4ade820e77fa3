"""Feedforward LM: forward laws, gradient checks, training behavior, IO."""

import numpy as np
import pytest

from nnlm.corpus import WindowSpec, build_vocab, encode, windows_matrix
from nnlm.neural_lm import (
    FfLmModel,
    KeyTap,
    LmConfig,
    extract_key,
    extract_keys_batch,
    forward,
    grad_check,
    init_model,
    mean_nll,
    target_logp_batch,
    train,
)
from nnlm.util import NnlmError


def small_config(**kw):
    base = dict(context_len=3, embed_dim=5, hidden_dim=16, vocab_size=50, seed=11)
    base.update(kw)
    return LmConfig(**base)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = init_model(small_config()), init_model(small_config())
        for name in a.param_names():
            assert np.array_equal(a.params[name], b.params[name])

    def test_different_seed_differs(self):
        a = init_model(small_config(seed=1))
        b = init_model(small_config(seed=2))
        assert not np.array_equal(a.params["w1"], b.params["w1"])

    def test_forward_valid_distribution(self):
        m = init_model(small_config())
        _, probs = forward(m, [1, 2, 3])
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)
        assert (probs >= 0).all()


class TestForward:
    def test_zero_weights_uniform(self):
        m = init_model(small_config())
        for name in m.param_names():
            if name != "ln_g":
                m.params[name][:] = 0
        _, probs = forward(m, [0, 1, 2])
        np.testing.assert_allclose(probs, 1.0 / 50, atol=1e-12)

    def test_inference_deterministic_and_dropout_free(self):
        m = init_model(small_config(dropout_rate=0.5))
        t1, p1 = forward(m, [4, 5, 6], train_mode=False)
        t2, p2 = forward(m, [4, 5, 6], train_mode=False)
        assert np.array_equal(p1, p2)
        for tap in t1:
            assert np.array_equal(t1[tap], t2[tap])

    def test_normalized_on_random_contexts(self):
        m = init_model(small_config())
        rng = np.random.default_rng(0)
        ctx = rng.integers(0, 50, size=(1000, 3))
        for row in ctx[:50]:
            _, p = forward(m, row)
            assert p.sum() == pytest.approx(1.0, abs=1e-6)
        # batch path agrees with the one-at-a-time path
        lp = target_logp_batch(m, ctx, np.zeros(len(ctx), dtype=np.int64))
        assert np.isfinite(lp).all()

    def test_out_of_range_id_rejected(self):
        m = init_model(small_config())
        with pytest.raises(NnlmError):
            forward(m, [0, 1, 50])


class TestTaps:
    def test_taps_generally_differ(self):
        m = init_model(small_config())
        taps, _ = forward(m, [1, 2, 3])
        assert not np.allclose(taps[KeyTap.HIDDEN_PRE_ACTIVATION], taps[KeyTap.HIDDEN_POST_ACTIVATION])
        assert not np.allclose(taps[KeyTap.HIDDEN_POST_ACTIVATION], taps[KeyTap.HIDDEN_POST_LAYER_NORM])

    def test_key_matches_forward_hidden(self):
        m = init_model(small_config())
        taps, _ = forward(m, [7, 8, 9])
        for tap in KeyTap:
            np.testing.assert_array_equal(extract_key(m, [7, 8, 9], tap), taps[tap])

    def test_layer_norm_tap_requires_layer_norm(self):
        m = init_model(small_config(use_layer_norm=False))
        with pytest.raises(NnlmError):
            extract_key(m, [1, 2, 3], KeyTap.HIDDEN_POST_LAYER_NORM)

    def test_output_input_equals_post_activation_without_ln(self):
        m = init_model(small_config(use_layer_norm=False))
        taps, _ = forward(m, [1, 2, 3])
        np.testing.assert_array_equal(
            taps[KeyTap.OUTPUT_LOGITS_INPUT], taps[KeyTap.HIDDEN_POST_ACTIVATION]
        )

    def test_same_context_in_different_documents_same_key(self):
        v = build_vocab("a b c d a b c e", min_count=1, max_size=20)
        seq = encode("a b c d\n\na b c e", v)
        m = init_model(small_config(vocab_size=v.size))
        ctx, _ = windows_matrix(seq, WindowSpec(3))
        k1 = extract_key(m, ctx[3])   # context "a b c" in doc 1
        k2 = extract_key(m, ctx[7])   # context "a b c" in doc 2
        np.testing.assert_array_equal(ctx[3], ctx[7])
        np.testing.assert_array_equal(k1, k2)

    def test_batch_extraction_matches_single(self):
        m = init_model(small_config())
        rng = np.random.default_rng(3)
        ctx = rng.integers(0, 50, size=(40, 3))
        batch = extract_keys_batch(m, ctx, KeyTap.HIDDEN_POST_LAYER_NORM, chunk=7)
        for i in range(40):
            np.testing.assert_allclose(batch[i], extract_key(m, ctx[i]), rtol=1e-6)


class TestGradCheck:
    @pytest.fixture
    def sample(self):
        rng = np.random.default_rng(5)
        ctx = rng.integers(0, 50, size=(8, 3))
        tgt = rng.integers(0, 50, size=8)
        return ctx, tgt

    @pytest.mark.parametrize("use_ln", [True, False])
    @pytest.mark.parametrize("dropout", [0.0, 0.3])
    def test_finite_difference_oracle(self, sample, use_ln, dropout):
        m = init_model(small_config(use_layer_norm=use_ln, dropout_rate=dropout))
        err = grad_check(m, *sample, epsilon=1e-5, n_coords=250)
        assert err < 1e-4

    def test_zero_weight_closed_form(self, sample):
        # all-zero weights give uniform output; the loss gradient reaching
        # the embedding is identically zero and d(loss)/d(b2) = mean over
        # the batch of (uniform - onehot)
        from nnlm.neural_lm import _loss_and_grads

        ctx, tgt = sample
        m = init_model(small_config()).astype(np.float64)
        for name in m.param_names():
            if name != "ln_g":
                m.params[name][:] = 0
        _, grads = _loss_and_grads(m, ctx, tgt, train_mode=False, rng=None)
        np.testing.assert_allclose(grads["embed"], 0.0, atol=1e-15)
        expected_b2 = np.full(50, 1.0 / 50) * len(tgt)
        for t in tgt:
            expected_b2[t] -= 1.0
        np.testing.assert_allclose(grads["b2"], expected_b2 / len(tgt), atol=1e-12)

    def test_epsilon_scaling_sane(self, sample):
        m = init_model(small_config())
        e1 = grad_check(m, *sample, epsilon=1e-5, n_coords=100)
        e2 = grad_check(m, *sample, epsilon=2e-5, n_coords=100)
        assert e2 < 10 * max(e1, 1e-12) or e2 < 1e-6

    def test_epsilon_range_enforced(self, sample):
        m = init_model(small_config())
        with pytest.raises(NnlmError):
            grad_check(m, *sample, epsilon=1e-3)


class TestTrain:
    def test_repeating_token_memorized(self):
        v = build_vocab("x " * 60, min_count=1, max_size=4)
        seq = encode("x " * 60, v)
        cfg = LmConfig(context_len=2, embed_dim=4, hidden_dim=8, vocab_size=v.size,
                       seed=1, epochs=40, batch_size=16, learning_rate=3e-2)
        m, curve = train(init_model(cfg), seq)
        assert curve[-1] < 0.01

    def test_training_deterministic(self):
        text = "a b c d e f g " * 30
        v = build_vocab(text, min_count=1, max_size=20)
        seq = encode(text, v)
        cfg = small_config(vocab_size=v.size, dropout_rate=0.2, epochs=3, batch_size=8)
        m1, c1 = train(init_model(cfg), seq)
        m2, c2 = train(init_model(cfg), seq)
        assert c1 == c2
        for name in m1.param_names():
            assert np.array_equal(m1.params[name], m2.params[name])

    def test_window_width_mismatch_rejected(self):
        v = build_vocab("a b c", min_count=1, max_size=10)
        seq = encode("a b c", v)
        cfg = small_config(vocab_size=v.size)
        with pytest.raises(NnlmError):
            train(init_model(cfg), seq, spec=WindowSpec(5))


class TestMeanNll:
    def test_uniform_model_ln_v(self):
        m = init_model(small_config())
        for name in m.param_names():
            if name != "ln_g":
                m.params[name][:] = 0
        v = build_vocab("a b c a b", min_count=1, max_size=10)
        seq = encode("a b c a b", v)
        m = FfLmModel(m.config, m.params)
        assert mean_nll(m, seq, WindowSpec(3)) == pytest.approx(np.log(50), abs=1e-9)

    def test_matches_direct_sum_oracle(self):
        rng = np.random.default_rng(9)
        text = " ".join(rng.choice(list("abcdefghij"), 100))
        v = build_vocab(text, min_count=1, max_size=20)
        seq = encode(text, v)
        m = init_model(small_config(vocab_size=v.size))
        spec = WindowSpec(3)
        # literal oracle: iterate windows, accumulate -log p one at a time
        from nnlm.corpus import iter_windows

        total = 0.0
        count = 0
        for ctx, tgt, _ in iter_windows(seq, spec):
            _, probs = forward(m, ctx)
            total += -np.log(probs[tgt])
            count += 1
        assert mean_nll(m, seq, spec) == pytest.approx(total / count, abs=1e-10)

    def test_perplexity_definition(self):
        m = init_model(small_config())
        v = build_vocab("a b a b a", min_count=1, max_size=10)
        seq = encode("a b a b a", v)
        nll = mean_nll(m, seq, WindowSpec(3))
        assert np.exp(nll) == pytest.approx(np.exp(1) ** nll, rel=1e-12)


class TestIO:
    def test_roundtrip(self, tmp_path):
        m = init_model(small_config())
        p = tmp_path / "model.bin"
        m.save(p)
        m2 = FfLmModel.load(p)
        assert m2.config == m.config
        for name in m.param_names():
            assert np.array_equal(m.params[name], m2.params[name])

    def test_roundtrip_no_layer_norm(self, tmp_path):
        m = init_model(small_config(use_layer_norm=False, dropout_rate=0.25))
        p = tmp_path / "model.bin"
        m.save(p)
        m2 = FfLmModel.load(p)
        assert m2.config == m.config
        assert set(m2.params) == set(m.params)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "model.bin"
        p.write_bytes(b"ZZZZ" + b"\x00" * 64)
        from nnlm.util import FileFormatError

        with pytest.raises(FileFormatError):
            FfLmModel.load(p)
