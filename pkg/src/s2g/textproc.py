"""Tokenization, vocabulary and input assembly for retriever and reader.

The tokenizer is deliberately simple (lowercase, split words and punctuation);
the assembly layer is where the structure lives: special-token injection,
whole-sentence truncation and the token-to-sentence map sigma.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

BOS, EOS, PAD, UNK, PARA, SENT = "<s>", "</s>", "<pad>", "<unk>", "<p>", "<e>"
SPECIALS = [BOS, EOS, PAD, UNK, PARA, SENT]

NONE_SENTENCE = -1
MAX_LEN = 512
K_MAX = 14

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class QuestionTooLongError(ValueError):
    pass


def split_text(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Immutable token->id map; special ids first and stable across save/load."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    @property
    def bos(self):
        return 0

    @property
    def eos(self):
        return 1

    @property
    def pad(self):
        return 2

    @property
    def unk(self):
        return 3

    @property
    def para(self):
        return 4

    @property
    def sent(self):
        return 5

    @classmethod
    def build(cls, texts) -> "Vocab":
        tokens = list(SPECIALS)
        seen = set(SPECIALS)
        for text in texts:
            for tok in split_text(text):
                if tok not in seen:
                    seen.add(tok)
                    tokens.append(tok)
        return cls(tokens)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def tokenize(text: str, vocab: Vocab) -> list[int]:
    unk = vocab.unk
    t2i = vocab.token_to_id
    return [t2i.get(tok, unk) for tok in split_text(text)]


@dataclass
class TokenSequence:
    ids: list[int]
    tokens: list[str]  # surface forms, for span detokenization

    def __len__(self):
        return len(self.ids)


@dataclass
class SentenceMap:
    """Per-sentence token spans and the token->sentence function sigma."""

    sentence_spans: list[tuple[int, int]]  # half-open, span includes the <e>
    placeholder_positions: list[int]
    token_to_sentence: np.ndarray  # sigma; NONE_SENTENCE for question/specials
    owners: list[tuple[int, int]] = field(default_factory=list)  # (paragraph, local idx)

    @property
    def n_sentences(self):
        return len(self.sentence_spans)


def sigma(smap: SentenceMap, position: int) -> int:
    if not 0 <= position < len(smap.token_to_sentence):
        raise IndexError(f"position {position} out of range")
    return int(smap.token_to_sentence[position])


def assemble_retriever_input(question: str, paragraph: str, vocab: Vocab,
                             max_len: int = MAX_LEN) -> TokenSequence:
    """`<s> question </s> paragraph </s>`, truncated keeping the full question."""
    q_toks = split_text(question)
    p_toks = split_text(paragraph)
    overhead = 3  # <s>, </s>, final </s>
    if len(q_toks) + overhead > max_len:
        raise QuestionTooLongError(f"question of {len(q_toks)} tokens exceeds max_len {max_len}")
    room = max_len - len(q_toks) - overhead
    p_toks = p_toks[:room]
    tokens = [BOS] + q_toks + [EOS] + p_toks + [EOS]
    t2i, unk = vocab.token_to_id, vocab.unk
    return TokenSequence([t2i.get(t, unk) for t in tokens], tokens)


def assemble_reader_input(question: str, paragraphs: list[list[str]], vocab: Vocab,
                          k_max: int = K_MAX, max_len: int = MAX_LEN
                          ) -> tuple[TokenSequence, SentenceMap]:
    """`<s> question </s> <e> s1 <e> s2 ... </s>` over the ordered paragraphs.

    Sentences beyond k_max get no placeholder and sigma NONE. Truncation drops
    trailing sentences whole.
    """
    q_toks = split_text(question)
    if len(q_toks) + 3 > max_len:
        raise QuestionTooLongError(f"question of {len(q_toks)} tokens exceeds max_len {max_len}")
    if sum(len(p) for p in paragraphs) == 0:
        raise ValueError("need at least one sentence")

    tokens = [BOS] + q_toks + [EOS]
    sig = [NONE_SENTENCE] * len(tokens)
    spans: list[tuple[int, int]] = []
    placeholders: list[int] = []
    owners: list[tuple[int, int]] = []
    n_mapped = 0
    truncated = False

    for p_idx, sentences in enumerate(paragraphs):
        for s_idx, sentence in enumerate(sentences):
            s_toks = split_text(sentence)
            mapped = n_mapped < k_max
            need = len(s_toks) + (1 if mapped else 0)
            if len(tokens) + need + 1 > max_len:  # +1 for the final </s>
                truncated = True
                break
            start = len(tokens)
            if mapped:
                placeholders.append(start)
                tokens.append(SENT)
                sig.append(n_mapped)
            tokens.extend(s_toks)
            if mapped:
                sig.extend([n_mapped] * len(s_toks))
                spans.append((start, len(tokens)))
                owners.append((p_idx, s_idx))
                n_mapped += 1
            else:
                sig.extend([NONE_SENTENCE] * len(s_toks))
        if truncated:
            break

    tokens.append(EOS)
    sig.append(NONE_SENTENCE)
    t2i, unk = vocab.token_to_id, vocab.unk
    seq = TokenSequence([t2i.get(t, unk) for t in tokens], tokens)
    smap = SentenceMap(spans, placeholders, np.asarray(sig, dtype=np.int64), owners)
    return seq, smap


def assemble_cascade_input(question: str, paragraphs: list[str], vocab: Vocab,
                           max_len: int = MAX_LEN) -> tuple[TokenSequence, list[int]]:
    """`<s> question </s> <p> P_a <p> P_b ... </s>`; returns <p> positions.

    Overflow drops trailing tokens of the long tail, never a <p> marker.
    """
    q_toks = split_text(question)
    n_para = len(paragraphs)
    overhead = 3 + n_para  # <s>, </s>, final </s>, one <p> each
    if len(q_toks) + overhead > max_len:
        raise QuestionTooLongError(f"question of {len(q_toks)} tokens exceeds max_len {max_len}")

    para_toks = [split_text(p) for p in paragraphs]
    room = max_len - len(q_toks) - overhead
    while sum(len(p) for p in para_toks) > room:
        longest = max(range(n_para), key=lambda i: len(para_toks[i]))
        para_toks[longest] = para_toks[longest][:-1]

    tokens = [BOS] + q_toks + [EOS]
    marker_positions = []
    for p in para_toks:
        marker_positions.append(len(tokens))
        tokens.append(PARA)
        tokens.extend(p)
    tokens.append(EOS)
    t2i, unk = vocab.token_to_id, vocab.unk
    return TokenSequence([t2i.get(t, unk) for t in tokens], tokens), marker_positions


_WORD = re.compile(r"\w")


def _matchable(seq: TokenSequence, pos: int) -> bool:
    """Match features consider word tokens only; specials, unknowns and
    punctuation are excluded as uninformative."""
    return seq.ids[pos] >= len(SPECIALS) and bool(_WORD.search(seq.tokens[pos]))


def question_match_flags(seq: TokenSequence, vocab: Vocab) -> np.ndarray:
    """Exact-match feature: 1.0 for evidence-side word tokens that also occur
    in the question segment (`<s> question </s> ...`); the question segment
    itself is all zeros."""
    ids = seq.ids
    try:
        q_end = ids.index(vocab.eos)
    except ValueError:
        q_end = len(ids)
    q_ids = {ids[p] for p in range(1, q_end) if _matchable(seq, p)}
    flags = np.zeros(len(ids))
    for pos in range(q_end + 1, len(ids)):
        if ids[pos] in q_ids and _matchable(seq, pos):
            flags[pos] = 1.0
    return flags


def reader_match_flags(seq: TokenSequence, smap: "SentenceMap",
                       vocab: Vocab) -> np.ndarray:
    """(n, 2) exact-match features for the reader sequence: column 0 flags
    evidence tokens that occur in the question, column 1 flags evidence tokens
    *not* in the question that also occur in a sentence of a different
    paragraph — the cue that two paragraphs mention the same bridge entity.
    (Question words recur across paragraphs by construction, so including them
    would drown the bridge signal.)"""
    n = len(seq.ids)
    flags = np.zeros((n, 2))
    flags[:, 0] = question_match_flags(seq, vocab)
    owners = smap.owners
    para_of = {}  # token id -> set of paragraph indices it occurs in
    for pos in range(n):
        sent = smap.token_to_sentence[pos]
        if sent == NONE_SENTENCE or not _matchable(seq, pos):
            continue
        para_of.setdefault(seq.ids[pos], set()).add(owners[sent][0])
    for pos in range(n):
        sent = smap.token_to_sentence[pos]
        if sent == NONE_SENTENCE or not _matchable(seq, pos):
            continue
        if flags[pos, 0] == 0.0 and len(para_of[seq.ids[pos]] - {owners[sent][0]}) > 0:
            flags[pos, 1] = 1.0
    return flags


def token_match_matrix(seq: TokenSequence, smap: "SentenceMap",
                       vocab: Vocab) -> np.ndarray:
    """Binary (n, n) matrix linking identical non-question word tokens that
    sit in sentences of *different* paragraphs — the positions where an
    attention head should look to follow a repeated entity across the
    paragraph boundary."""
    n = len(seq.ids)
    qflags = question_match_flags(seq, vocab)
    owners = smap.owners
    pos = [p for p in range(n)
           if smap.token_to_sentence[p] != NONE_SENTENCE
           and _matchable(seq, p) and qflags[p] == 0.0]
    m = np.zeros((n, n))
    for i in pos:
        for j in pos:
            if (seq.ids[i] == seq.ids[j]
                    and owners[smap.token_to_sentence[i]][0]
                    != owners[smap.token_to_sentence[j]][0]):
                m[i, j] = 1.0
    return m


def sentence_match_matrix(seq: TokenSequence, smap: "SentenceMap",
                          vocab: Vocab) -> np.ndarray:
    """Binary (k+1, k+1) matrix (sentence placeholders plus the question slot
    last) linking sentences of different paragraphs that share a non-question
    word token."""
    k = smap.n_sentences
    qflags = question_match_flags(seq, vocab)
    shared: list[set[int]] = []
    for s, e in smap.sentence_spans:
        shared.append({seq.ids[p] for p in range(s, e)
                       if _matchable(seq, p) and qflags[p] == 0.0})
    m = np.zeros((k + 1, k + 1))
    for i in range(k):
        for j in range(k):
            if (smap.owners[i][0] != smap.owners[j][0]
                    and shared[i] & shared[j]):
                m[i, j] = 1.0
    return m


def _evidence_mask(seq: TokenSequence, vocab: Vocab) -> np.ndarray:
    """True on matchable word tokens of the evidence segment (after the
    first `</s>`)."""
    keep = np.array([_matchable(seq, p) for p in range(len(seq.ids))])
    if vocab.eos in seq.ids:
        keep[: seq.ids.index(vocab.eos) + 1] = False
    return keep


def evidence_token_ids(seq: TokenSequence, vocab: Vocab) -> set[int]:
    """Distinct matchable word-token ids in the evidence segment."""
    mask = _evidence_mask(seq, vocab)
    return {tid for tid, m in zip(seq.ids, mask) if m}


def reformulation_mask(seq: TokenSequence, vocab: Vocab) -> np.ndarray:
    """Bool (len(seq),): the tokens a follow-up query is reformulated with.

    True on evidence word tokens that sit in a sentence containing a
    question-overlap token but are not question tokens themselves — in a
    bridge paragraph that is exactly the unknown argument of the question's
    relation. Punctuation and specials delimit sentences."""
    qf = question_match_flags(seq, vocab)
    ev = _evidence_mask(seq, vocab)
    mask = np.zeros(len(seq.ids), dtype=bool)
    start = seq.ids.index(vocab.eos) + 1 if vocab.eos in seq.ids else 0

    def flush(sent: list[int]) -> None:
        if any(qf[p] == 1.0 for p in sent):
            for p in sent:
                if ev[p] and qf[p] == 0.0:
                    mask[p] = True

    sent: list[int] = []
    for p in range(start, len(seq.ids)):
        if _matchable(seq, p):
            sent.append(p)
        else:
            flush(sent)
            sent = []
    flush(sent)
    return mask


def exact_match_matrix(context: TokenSequence, query: TokenSequence,
                       vocab: Vocab,
                       exclude_ids: set[int] | None = None) -> np.ndarray:
    """Binary (len(context), len(query)) matrix of identical non-special
    tokens, restricted to the evidence segments (after the first `</s>`) of
    both sequences, for attention biasing. `exclude_ids` drops token types
    from matching (e.g. types too frequent across candidates to identify
    anything)."""
    c = np.asarray(context.ids)
    q = np.asarray(query.ids)
    cm, qm = _evidence_mask(context, vocab), _evidence_mask(query, vocab)
    if exclude_ids:
        cm = cm & ~np.isin(c, list(exclude_ids))
        qm = qm & ~np.isin(q, list(exclude_ids))
    m = (c[:, None] == q[None, :]) & cm[:, None] & qm[None, :]
    return m.astype(np.float64)
