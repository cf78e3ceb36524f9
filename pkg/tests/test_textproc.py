import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2g.textproc import (BOS, EOS, K_MAX, NONE_SENTENCE, PARA, SENT, SPECIALS,
                          QuestionTooLongError, Vocab, assemble_cascade_input,
                          assemble_reader_input, assemble_retriever_input,
                          sigma, split_text, tokenize)


@pytest.fixture
def vocab():
    return Vocab.build(["the cat sat on the mat .", "where did the cat sit ?",
                        "a b c d e f g h"])


class TestTokenize:
    def test_empty(self, vocab):
        assert tokenize("", vocab) == []

    def test_repetition(self, vocab):
        ids = tokenize("the the", vocab)
        assert len(ids) == 2 and ids[0] == ids[1] == vocab.token_to_id["the"]

    def test_oov(self, vocab):
        assert tokenize("zzqx", vocab) == [vocab.unk]

    def test_lowercase_and_punct_split(self, vocab):
        assert split_text("The cat.") == ["the", "cat", "."]

    @given(st.text(max_size=40))
    @settings(max_examples=50, deadline=None)
    def test_deterministic(self, text):
        assert split_text(text) == split_text(text)


class TestVocab:
    def test_specials_first(self, vocab):
        assert vocab.id_to_token[:6] == SPECIALS
        assert (vocab.bos, vocab.eos, vocab.pad, vocab.unk, vocab.para, vocab.sent) \
            == (0, 1, 2, 3, 4, 5)

    def test_save_load_roundtrip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        assert Vocab.load(path).id_to_token == vocab.id_to_token

    def test_missing_specials_rejected(self):
        with pytest.raises(ValueError, match="special"):
            Vocab(["a", "b"])

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            Vocab(SPECIALS + ["a", "a"])


class TestRetrieverInput:
    def test_layout(self, vocab):
        seq = assemble_retriever_input("where ?", "the cat sat .", vocab)
        assert seq.tokens == [BOS, "where", "?", EOS, "the", "cat", "sat", ".", EOS]

    def test_empty_paragraph(self, vocab):
        seq = assemble_retriever_input("where ?", "", vocab)
        assert seq.tokens == [BOS, "where", "?", EOS, EOS]

    def test_truncation_keeps_question_and_eos(self, vocab):
        seq = assemble_retriever_input("where ?", "a " * 600, vocab, max_len=20)
        assert len(seq) == 20
        assert seq.tokens[-1] == EOS and seq.tokens[1:3] == ["where", "?"]

    def test_overlong_question(self, vocab):
        with pytest.raises(QuestionTooLongError):
            assemble_retriever_input("a " * 600, "p", vocab, max_len=20)


class TestReaderInput:
    def test_layout_and_sigma(self, vocab):
        seq, smap = assemble_reader_input("where ?", [["a b .", "c d ."]], vocab)
        assert seq.tokens == [BOS, "where", "?", EOS,
                              SENT, "a", "b", ".", SENT, "c", "d", ".", EOS]
        assert smap.placeholder_positions == [4, 8]
        assert smap.sentence_spans == [(4, 8), (8, 12)]
        assert [sigma(smap, i) for i in (0, 4, 7, 8, 11, 12)] \
            == [NONE_SENTENCE, 0, 0, 1, 1, NONE_SENTENCE]

    def test_k_max_cap(self, vocab):
        sents = [f"a b {i} ." for i in range(16)]
        seq, smap = assemble_reader_input("where ?", [sents], vocab)
        assert smap.n_sentences == K_MAX == 14
        assert seq.tokens.count(SENT) == 14
        # sentences 15 and 16 still present, just unmapped
        assert np.sum(smap.token_to_sentence == NONE_SENTENCE) > 5

    def test_k_counts_both_paragraphs(self, vocab):
        seq, smap = assemble_reader_input(
            "where ?", [["a .", "b ."], ["c .", "d .", "e ."]], vocab)
        assert smap.n_sentences == 5
        assert smap.owners == [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2)]

    def test_whole_sentence_truncation(self, vocab):
        seq, smap = assemble_reader_input(
            "where ?", [["a b c d .", "e f g h ."]], vocab, max_len=13)
        # second sentence does not fit; dropped whole
        assert smap.n_sentences == 1
        assert seq.tokens[-1] == EOS
        assert len(seq) <= 13

    def test_no_sentences_rejected(self, vocab):
        with pytest.raises(ValueError, match="sentence"):
            assemble_reader_input("where ?", [[], []], vocab)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_map_invariants(self, seed):
        rng = np.random.default_rng(seed)
        words = ["cat", "dog", "sat", "ran", "."]
        paras = [[" ".join(rng.choice(words, rng.integers(1, 5)))
                  for _ in range(rng.integers(1, 9))] for _ in range(2)]
        v = Vocab.build([" ".join(words)])
        seq, smap = assemble_reader_input("where ?", paras, v)
        assert seq.tokens[0] == BOS and len(seq) <= 512
        assert seq.tokens.count(SENT) == min(sum(map(len, paras)), 14)
        for i, (lo, hi) in enumerate(smap.sentence_spans):
            assert smap.placeholder_positions[i] == lo
            assert all(smap.token_to_sentence[lo:hi] == i)
            assert sigma(smap, lo) == i
        # spans ascending, non-overlapping
        flat = [b for span in smap.sentence_spans for b in span]
        assert flat == sorted(flat)

    def test_sigma_out_of_range(self, vocab):
        _, smap = assemble_reader_input("where ?", [["a ."]], vocab)
        with pytest.raises(IndexError):
            sigma(smap, 99)


class TestCascadeInput:
    def test_layout(self, vocab):
        seq, markers = assemble_cascade_input("where ?", ["a b", "c"], vocab)
        assert seq.tokens == [BOS, "where", "?", EOS, PARA, "a", "b", PARA, "c", EOS]
        assert markers == [4, 7]
        assert [seq.tokens[m] for m in markers] == [PARA, PARA]

    def test_overflow_trims_longest_keeps_markers(self, vocab):
        seq, markers = assemble_cascade_input(
            "where ?", ["a " * 50, "b c", "d"], vocab, max_len=20)
        assert len(seq) == 20
        assert len(markers) == 3
        assert [seq.tokens[m] for m in markers] == [PARA] * 3
        assert "b" in seq.tokens and "d" in seq.tokens  # short tails survive
