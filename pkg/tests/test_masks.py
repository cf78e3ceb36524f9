import numpy as np
import pytest

from oracles import ega_oracle, random_sentence_map, sasa_oracle
from s2g.masks import (AttentionMask, EvidenceSelection, build_ega_mask,
                       build_full_mask, build_sasa_mask)
from s2g.textproc import NONE_SENTENCE, SentenceMap

NEG = -np.inf


def toy_map():
    """[e0, w, w, e1, w]: sentence 0 = positions 0-2, sentence 1 = positions 3-4."""
    return SentenceMap(
        sentence_spans=[(0, 3), (3, 5)],
        placeholder_positions=[0, 3],
        token_to_sentence=np.array([0, 0, 0, 1, 1]),
        owners=[(0, 0), (0, 1)],
    )


class TestFullMask:
    def test_n1(self):
        assert np.array_equal(build_full_mask(1).entries, [[0.0]])

    def test_n3_zeros(self):
        m = build_full_mask(3)
        assert m.entries.shape == (3, 3) and not m.entries.any()

    def test_exp_row_sums(self):
        m = build_full_mask(7)
        assert np.array_equal(np.exp(m.entries).sum(axis=1), np.full(7, 7.0))

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            build_full_mask(0)


class TestSasaMask:
    def test_toy_placeholder_row(self):
        m = build_sasa_mask(toy_map(), 5)
        assert list(m.entries[0]) == [0, 0, 0, 0, NEG]

    def test_toy_word_row(self):
        m = build_sasa_mask(toy_map(), 5)
        assert list(m.entries[4]) == [NEG, 0, 0, 0, 0]

    def test_no_placeholders_full(self):
        smap = SentenceMap([], [], np.full(6, NONE_SENTENCE), [])
        assert not build_sasa_mask(smap, 6).entries.any()

    def test_single_sentence_covering_all_is_full(self):
        smap = SentenceMap([(0, 4)], [0], np.array([0, 0, 0, 0]), [(0, 0)])
        assert not build_sasa_mask(smap, 4).entries.any()

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="covers 5"):
            build_sasa_mask(toy_map(), 6)

    def test_symmetric_and_word_block_open(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            smap, n = random_sentence_map(rng)
            m = build_sasa_mask(smap, n).entries
            assert np.array_equal(m, m.T)
            words = np.setdiff1d(np.arange(n), smap.placeholder_positions)
            assert not m[np.ix_(words, words)].any()

    def test_placeholder_row_support(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            smap, n = random_sentence_map(rng)
            m = build_sasa_mask(smap, n).entries
            for s_idx, p in enumerate(smap.placeholder_positions):
                lo, hi = smap.sentence_spans[s_idx]
                expect = set(range(lo, hi)) | set(smap.placeholder_positions)
                assert set(np.flatnonzero(m[p] == 0.0)) == expect

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            smap, n = random_sentence_map(rng)
            assert np.array_equal(build_sasa_mask(smap, n).entries, sasa_oracle(smap, n))


class TestEgaMask:
    def test_all_selected_is_full(self):
        m = build_ega_mask(toy_map(), EvidenceSelection([1, 1]), 5)
        assert not m.entries.any()

    def test_one_unselected(self):
        m = build_ega_mask(toy_map(), EvidenceSelection([1, 0]), 5).entries
        # sentence-0 tokens see everything except sentence-1 tokens
        assert list(m[1]) == [0, 0, 0, NEG, NEG]
        # sentence-1 tokens see only themselves
        assert list(m[4]) == [NEG, NEG, NEG, NEG, 0]

    def test_all_unselected_identity_over_sentences(self):
        smap = toy_map()
        m = build_ega_mask(smap, EvidenceSelection([0, 0]), 5).entries
        expected = np.full((5, 5), NEG)
        np.fill_diagonal(expected, 0.0)
        assert np.array_equal(m, expected)

    def test_question_tokens_always_selected(self):
        sig = np.array([NONE_SENTENCE, NONE_SENTENCE, 0, 0])
        smap = SentenceMap([(2, 4)], [2], sig, [(0, 0)])
        m = build_ega_mask(smap, EvidenceSelection([0]), 4).entries
        assert not m[:2, :2].any()
        assert m[0, 2] == NEG and m[2, 1] == NEG

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="flags"):
            build_ega_mask(toy_map(), EvidenceSelection([1]), 5)

    def test_flip_monotonicity(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            smap, n = random_sentence_map(rng)
            k = smap.n_sentences
            if k == 0:
                continue
            z = [1] * k
            prev = build_ega_mask(smap, EvidenceSelection(z), n).entries
            assert not prev.any()
            for i in range(k):
                z[i] = 0
                cur = build_ega_mask(smap, EvidenceSelection(list(z)), n).entries
                assert np.all(cur[prev == NEG] == NEG)  # only adds -inf
                prev = cur

    def test_every_row_has_open_entry(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            smap, n = random_sentence_map(rng)
            z = list(rng.integers(0, 2, smap.n_sentences))
            m = build_ega_mask(smap, EvidenceSelection(z), n).entries
            assert np.all((m == 0.0).any(axis=1))

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            smap, n = random_sentence_map(rng)
            z = list(rng.integers(0, 2, smap.n_sentences))
            got = build_ega_mask(smap, EvidenceSelection(z), n).entries
            assert np.array_equal(got, ega_oracle(smap, z, n))


class TestDebugGrid:
    def test_toy_grid(self):
        grid = build_sasa_mask(toy_map(), 5).to_debug_grid()
        assert grid.splitlines()[0] == "....#"
        assert grid.splitlines()[4] == "#...."

    def test_roundtrip_chars(self):
        m = AttentionMask(2, np.array([[0.0, NEG], [NEG, 0.0]]))
        assert m.to_debug_grid() == ".#\n#."
