import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointer_mixture.ast_pipeline import EMPTY, AstNode, build_corpus
from pointer_mixture.vocab import (
    KIND_MASKED,
    KIND_VOCAB,
    KIND_WINDOW,
    MASKED_UNK,
    Vocabularies,
    VocabId,
    WindowPos,
    build_vocab,
    build_vocabularies,
    compute_stats,
    in_vocab_mask,
    label_program,
    label_target,
)


def flat_program(values):
    """A root with one leaf child per value."""
    return [AstNode("R", None, tuple(range(1, len(values) + 1)))] + [AstNode("L", v) for v in values]


class TestBuildVocab:
    def test_top_k(self):
        v = build_vocab(["a"] * 3 + ["b"] * 2 + ["c"], 2)
        assert v.words == ["a", "b"] and len(v) == 5

    def test_lexicographic_tie_break(self):
        assert build_vocab(["b", "b", "a", "a"], 1).words == ["a"]

    def test_specials_follow_words(self):
        v = build_vocab(["a", "b"], 2)
        assert (v.unk, v.eof, v.empty) == (2, 3, 4)
        assert v.encode("zzz") == v.unk and v.encode(EMPTY) == v.empty

    def test_k_larger_than_distinct(self, caplog):
        v = build_vocab(["a", "b"], 10)
        assert v.words == ["a", "b"]
        assert "exceeds" in caplog.text

    def test_empty_not_counted(self):
        corpus = build_corpus([flat_program(["x", "x", "y"])])
        v = build_vocab(corpus, 5)
        assert EMPTY not in v.words and v.words == ["x", "y"]

    def test_deterministic_and_frequency_ordered(self, rng):
        vals = [f"v{int(i)}" for i in rng.zipf(1.5, size=2000) % 300]
        a, b = build_vocab(vals, 40), build_vocab(list(vals), 40)
        assert a.words == b.words
        from collections import Counter
        counts = Counter(vals)
        kept = min(counts[w] for w in a.words)
        dropped = max((c for w, c in counts.items() if w not in a.words), default=0)
        assert kept >= dropped

    def test_file_round_trip(self, tmp_path):
        corpus = build_corpus([flat_program(["a", "b", "a", "c"])])
        vs = build_vocabularies(corpus, 2)
        vs.save(tmp_path / "v.json")
        back = Vocabularies.load(tmp_path / "v.json")
        assert back.values.words == vs.values.words and back.types.names == vs.types.names


class TestLabel:
    def test_last_occurrence(self):
        v = build_vocab(["a"], 1)
        assert label_target("x", ["x", "y", "x"], v) == WindowPos(1)
        assert label_target("x", ["x", "y", "x", "z"], v) == WindowPos(2)

    def test_vocab_precedence(self):
        v = build_vocab(["a"] * 5 + ["q"] * 2, 2)
        assert label_target("q", ["q", "q"], v) == VocabId(v.encode("q"))

    def test_empty_window(self):
        assert label_target("x", [], build_vocab(["a"], 1)) is MASKED_UNK

    def test_empty_value_is_vocab(self):
        v = build_vocab(["a"], 1)
        assert label_target(EMPTY, [EMPTY], v) == VocabId(v.empty)

    def test_array_form_matches_scalar(self, rng):
        values = [f"v{int(i)}" for i in rng.integers(0, 25, size=400)]
        corpus = build_corpus([flat_program(values)])
        vocab = build_vocab([f"v{i}" for i in range(5)], 5)
        prog = corpus.programs[0]
        L = 7
        lab = label_program(prog.values, in_vocab_mask(corpus, vocab), vocab, L)
        strings = [corpus.strings[r] for r in prog.values]
        for t, s in enumerate(strings):
            ref = label_target(s, strings[max(0, t - L):t], vocab)
            if isinstance(ref, VocabId):
                assert (lab.kind[t], lab.index[t]) == (KIND_VOCAB, ref.id)
            elif isinstance(ref, WindowPos):
                assert (lab.kind[t], lab.index[t]) == (KIND_WINDOW, ref.offset)
            else:
                assert lab.kind[t] == KIND_MASKED

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.sampled_from("abcdefg"), max_size=12), st.sampled_from("abcdefg"),
           st.sets(st.sampled_from("abcdefg"), min_size=1))
    def test_properties(self, window, target, vocab_words):
        v = build_vocab(sorted(vocab_words), len(vocab_words))
        lab = label_target(target, window, v)
        if target in vocab_words:
            assert isinstance(lab, VocabId)
        elif target in window:
            assert isinstance(lab, WindowPos)
            hits = [len(window) - i for i, w in enumerate(window) if w == target]
            assert lab.offset == min(hits)
        else:
            assert lab is MASKED_UNK


class TestStats:
    def test_all_in_vocab(self):
        corpus = build_corpus([flat_program(["a", "b", "a"])])
        s = compute_stats(corpus, build_vocab(corpus, 10), 50)
        assert s.oov_rate == 0 and s.localness == 0 and s.node_count == 4

    def test_counts(self):
        corpus = build_corpus([flat_program(["a", "a", "x", "y", "x"])])
        v = build_vocab(["a"], 1)
        s = compute_stats(corpus, v, 50)
        # nodes: root(EMPTY), a, a, x, y, x -> OoV x, y, x; local: second x
        assert (s.oov_count, s.local_count, s.node_count) == (3, 1, 6)

    def test_window_never_crosses_programs(self):
        corpus = build_corpus([flat_program(["x"]), flat_program(["x"])])
        s = compute_stats(corpus, build_vocab(["a"], 1), 50)
        assert s.local_count == 0

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 30), min_size=1, max_size=40), min_size=1, max_size=5),
           st.integers(1, 20), st.integers(1, 20), st.integers(1, 10))
    def test_monotone_in_k_and_bounded(self, progs, k1, k2, L):
        corpus = build_corpus([flat_program([f"v{x}" for x in p]) for p in progs])
        lo, hi = sorted((k1, k2))
        s_lo = compute_stats(corpus, build_vocab(corpus, lo), L)
        s_hi = compute_stats(corpus, build_vocab(corpus, hi), L)
        assert s_hi.oov_rate <= s_lo.oov_rate
        for s in (s_lo, s_hi):
            assert 0 <= s.localness <= s.oov_rate <= 1
