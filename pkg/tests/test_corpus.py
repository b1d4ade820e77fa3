"""Vocabulary, encoding, and window iteration."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnlm.corpus import (
    BOS_ID,
    BOS_TOKEN,
    UNK_ID,
    UNK_TOKEN,
    TokenSequence,
    Vocab,
    WindowSpec,
    build_vocab,
    decode,
    encode,
    iter_windows,
    windows_matrix,
)
from nnlm.util import FileFormatError, NnlmError


class TestBuildVocab:
    def test_direct_counting(self):
        v = build_vocab("a a b", min_count=1, max_size=10)
        assert v.tokens == (UNK_TOKEN, BOS_TOKEN, "a", "b")
        assert v.counts[v.id_of("a")] == 2
        assert v.counts[v.id_of("b")] == 1

    def test_min_count_threshold(self):
        v = build_vocab("a a b", min_count=2, max_size=10)
        assert v.tokens == (UNK_TOKEN, BOS_TOKEN, "a")
        assert v.id_of("b") == UNK_ID
        # dropped mass lands on UNK
        assert v.counts[UNK_ID] == 1

    def test_empty_corpus_errors(self):
        with pytest.raises(NnlmError, match="empty corpus"):
            build_vocab("", min_count=1, max_size=10)
        with pytest.raises(NnlmError, match="empty corpus"):
            build_vocab("   \n \n ", min_count=1, max_size=10)

    def test_truncation_ties_lexicographic(self):
        # c and b tie on count; b wins the last slot lexicographically
        v = build_vocab("a a a c b", min_count=1, max_size=4)
        assert v.tokens == (UNK_TOKEN, BOS_TOKEN, "a", "b")

    def test_large_sample_matches_hashmap_oracle(self):
        # independent oracle: plain dict counting with the same threshold
        rng = np.random.default_rng(7)
        words = [f"w{int(i)}" for i in rng.zipf(1.4, size=200_000) if i < 5000]
        text = " ".join(words)
        oracle: dict[str, int] = {}
        for w in words:
            oracle[w] = oracle.get(w, 0) + 1
        expected = sum(1 for c in oracle.values() if c >= 3) + 2
        v = build_vocab(text, min_count=3, max_size=1 << 30)
        assert v.size == expected

    def test_sorted_by_count_then_lex(self):
        v = build_vocab("b b b a a c", min_count=1, max_size=10)
        assert v.tokens[2:] == ("b", "a", "c")


class TestEncode:
    @pytest.fixture
    def vocab(self):
        return build_vocab("a a b", min_count=1, max_size=10)

    def test_basic(self, vocab):
        seq = encode("a b", vocab)
        assert seq.ids.tolist() == [vocab.id_of("a"), vocab.id_of("b")]
        assert seq.doc_offsets.tolist() == [0]

    def test_blank_line_boundary(self, vocab):
        seq = encode("a\n\nb", vocab)
        assert seq.ids.tolist() == [vocab.id_of("a"), vocab.id_of("b")]
        assert seq.doc_offsets.tolist() == [0, 1]

    def test_oov_becomes_unk(self, vocab):
        seq = encode("a zzz b", vocab)
        assert seq.ids.tolist()[1] == UNK_ID

    def test_roundtrip_decode(self, vocab):
        text = "a b zzz\n\nb a"
        seq = encode(text, vocab)
        assert decode(seq, vocab) == f"a b {UNK_TOKEN}\n\nb a"

    def test_empty_text(self, vocab):
        seq = encode("", vocab)
        assert len(seq) == 0 and seq.n_docs == 0

    def test_deterministic(self, vocab):
        a = encode("a b\n\nb zzz a", vocab)
        b = encode("a b\n\nb zzz a", vocab)
        assert np.array_equal(a.ids, b.ids)
        assert np.array_equal(a.doc_offsets, b.doc_offsets)

    def test_multiple_blank_lines_one_boundary(self, vocab):
        seq = encode("a\n\n\n\nb", vocab)
        assert seq.doc_offsets.tolist() == [0, 1]


class TestWindows:
    def test_three_token_doc(self):
        v = build_vocab("x y z", min_count=1, max_size=10)
        seq = encode("x y z", v)
        x, y, z = (v.id_of(t) for t in "xyz")
        wins = list(iter_windows(seq, WindowSpec(context_len=2)))
        assert len(wins) == 3
        assert wins[0][0].tolist() == [BOS_ID, BOS_ID] and wins[0][1] == x
        assert wins[1][0].tolist() == [BOS_ID, x] and wins[1][1] == y
        assert wins[2][0].tolist() == [x, y] and wins[2][1] == z

    def test_document_isolation(self):
        v = build_vocab("a b c d e f g h i j", min_count=1, max_size=20)
        seq = encode("a b c d e\n\nf g h i j", v)
        ctx, _ = windows_matrix(seq, WindowSpec(context_len=3))
        first_doc_ids = set(seq.ids[:5].tolist())
        for row in ctx[5:]:
            assert not (set(row.tolist()) - {BOS_ID}) & first_doc_ids

    @given(
        docs=st.lists(st.lists(st.integers(2, 30), min_size=1, max_size=12), min_size=1, max_size=5),
        n=st.integers(1, 7),
    )
    @settings(max_examples=60, deadline=None)
    def test_window_count_equals_token_count(self, docs, n):
        ids = [t for doc in docs for t in doc]
        offsets = np.cumsum([0] + [len(d) for d in docs[:-1]])
        seq = TokenSequence(ids=np.array(ids, np.uint32), doc_offsets=offsets)
        ctx, targets = windows_matrix(seq, WindowSpec(context_len=n))
        assert ctx.shape == (len(ids), n)
        assert targets.tolist() == ids
        # no context leaks ids from a preceding document
        for start, end in seq.doc_bounds():
            doc = seq.ids[start:end]
            for t in range(start, end):
                row = ctx[t]
                inside = t - start  # tokens available in this doc
                assert (row[: n - inside] == BOS_ID).all() if inside < n else True
                np.testing.assert_array_equal(row[max(0, n - inside):], doc[max(0, inside - n): inside])


class TestIO:
    def test_vocab_roundtrip(self, tmp_path):
        v = build_vocab("a a b c c c", min_count=1, max_size=10)
        p = tmp_path / "vocab.txt"
        v.save(p)
        v2 = Vocab.load(p)
        assert v2.tokens == v.tokens and v2.counts == v.counts

    def test_vocab_bad_sentinels(self, tmp_path):
        p = tmp_path / "vocab.txt"
        p.write_text("a\t1\nb\t2\n")
        with pytest.raises(FileFormatError):
            Vocab.load(p)

    def test_tokens_roundtrip(self, tmp_path):
        seq = TokenSequence(ids=np.array([3, 4, 5, 6], np.uint32), doc_offsets=np.array([0, 2]))
        p = tmp_path / "tokens.bin"
        seq.save(p)
        seq2 = TokenSequence.load(p)
        assert np.array_equal(seq.ids, seq2.ids)
        assert np.array_equal(seq.doc_offsets, seq2.doc_offsets)

    def test_tokens_bad_magic(self, tmp_path):
        p = tmp_path / "tokens.bin"
        p.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(FileFormatError):
            TokenSequence.load(p)

    def test_tokens_truncated(self, tmp_path):
        seq = TokenSequence(ids=np.arange(10, dtype=np.uint32), doc_offsets=np.array([0]))
        p = tmp_path / "tokens.bin"
        seq.save(p)
        data = p.read_bytes()
        p.write_bytes(data[:-6])
        with pytest.raises(FileFormatError):
            TokenSequence.load(p)
