"""Multi-task comprehension over the selected paragraph pair.

One shared encoder pass under the sentence-aware mask feeds two branches:
the Sentence Transformer over placeholder embeddings (supporting-fact logits)
and the evidence-guided Answer Transformer (span and type logits).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import (EncoderConfig, apply_layer, apply_mlp, encode,
                      init_layer_params, init_mlp_params)
from .masks import EvidenceSelection, build_ega_mask, build_sasa_mask
from .tensor import Tensor
from .textproc import (NONE_SENTENCE, SentenceMap, TokenSequence, Vocab,
                       assemble_reader_input, reader_match_flags,
                       sentence_match_matrix, token_match_matrix)


@dataclass
class ReaderConfig:
    t_layers: int = 2  # self-attention layers in each of the two branch transformers
    lambda1: float = 2.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    max_answer_len: int = 30
    k_max: int = 14
    sent_threshold: float = 0.5
    use_sentence_transformer: bool = True
    use_answer_transformer: bool = True

    def __post_init__(self):
        if self.t_layers < 1 or min(self.lambda1, self.lambda2, self.lambda3) <= 0:
            raise ValueError("t_layers must be >= 1 and loss weights positive")


TYPE_SPAN, TYPE_YES, TYPE_NO = 0, 1, 2


@dataclass
class ReaderOutput:
    o_sent: Tensor  # (k,)
    o_start: Tensor  # (seq_len,)
    o_end: Tensor  # (seq_len,)
    o_type: Tensor  # (3,) over {span, yes, no}
    z: EvidenceSelection


@dataclass
class ReaderGold:
    sent_flags: np.ndarray  # (k,) binary
    start: int | None  # token indices; None for yes/no
    end: int | None
    type_index: int


@dataclass
class Prediction:
    answer_text: str
    supporting_facts: set[tuple[str, int]]


class Reader:
    def __init__(self, enc_params: dict, enc_config: EncoderConfig,
                 config: ReaderConfig, vocab: Vocab, rng: np.random.Generator):
        self.enc_params = enc_params
        self.enc_config = enc_config
        self.config = config
        self.vocab = vocab
        d, dff = enc_config.d_model, enc_config.d_ff
        p: dict[str, Tensor] = {}
        if config.use_sentence_transformer:
            for i in range(config.t_layers):
                init_layer_params(p, f"read.sent{i}", d, dff, rng, match=True)
        init_mlp_params(p, "read.sent_head", [d, 1], rng)
        if config.use_answer_transformer:
            for i in range(config.t_layers):
                init_layer_params(p, f"read.ans{i}", d, dff, rng, match=True)
        init_mlp_params(p, "read.span_head", [d, d, 2], rng)
        # pooled <s> state, mean- and max-pooled views, and the per-column
        # totals of the exact-match flags: existence cues (is there a token
        # shared by both paragraphs?) survive pooling and the raw flag counts,
        # but wash out under softmax attention. A single linear layer: the
        # type decision is near-linear in these features, and a deeper head
        # with small init needs far more steps to pick up the flag counts
        init_mlp_params(p, "read.type_head", [3 * d + 2, 3], rng)
        self.params = p

    def all_params(self) -> dict[str, Tensor]:
        return {**self.enc_params, **self.params}

    def assemble(self, question: str, paragraphs: list[list[str]]):
        return assemble_reader_input(question, paragraphs, self.vocab,
                                     self.config.k_max, self.enc_config.max_len)

    # -- branches ----------------------------------------------------------

    def predict_sentences(self, hidden: Tensor, smap: SentenceMap,
                          sent_match: np.ndarray | None = None,
                          train=False, rng=None) -> Tensor:
        k = smap.n_sentences
        if k == 0:
            raise ValueError("no mapped sentences")
        # k placeholder vectors plus the question placeholder (<s>) at the end
        seq = T.gather_rows(hidden, list(smap.placeholder_positions) + [0])
        if self.config.use_sentence_transformer:
            for i in range(self.config.t_layers):
                seq = apply_layer(seq, None, self.params, f"read.sent{i}",
                                  self.enc_config.n_heads,
                                  self.enc_config.dropout_rate if train else 0.0, rng,
                                  match=sent_match)
        sent_vecs = T.gather_rows(seq, np.arange(k))
        return T.reshape(apply_mlp(sent_vecs, self.params, "read.sent_head", 1), (k,))

    def predict_answer(self, hidden: Tensor, smap: SentenceMap, z: EvidenceSelection,
                       match_flags: np.ndarray | None = None,
                       tok_match: np.ndarray | None = None,
                       train=False, rng=None) -> tuple[Tensor, Tensor, Tensor]:
        n = hidden.shape[0]
        h = hidden
        if self.config.use_answer_transformer:
            ega = build_ega_mask(smap, z, n)
            for i in range(self.config.t_layers):
                h = apply_layer(h, ega.entries, self.params, f"read.ans{i}",
                                self.enc_config.n_heads,
                                self.enc_config.dropout_rate if train else 0.0, rng,
                                match=tok_match)
        span = apply_mlp(h, self.params, "read.span_head", 2)  # (n, 2)
        span_mask = Tensor(self._span_position_mask(smap, n))
        o_start = T.add(T.reshape(T.gather_rows(T.transpose(span, (1, 0)), [0]), (n,)), span_mask)
        o_end = T.add(T.reshape(T.gather_rows(T.transpose(span, (1, 0)), [1]), (n,)), span_mask)
        d = h.shape[1]
        if match_flags is None:
            match_flags = np.zeros((n, 2))
        pooled = T.concat([T.gather_rows(h, [0]),
                           T.reshape(T.mean_axis0(h), (1, d)),
                           T.reshape(T.max_axis(h, 0), (1, d)),
                           Tensor(match_flags.sum(axis=0).reshape(1, 2))],
                          axis=1)  # (1, 3d + 2)
        o_type = T.reshape(apply_mlp(pooled, self.params, "read.type_head", 1), (3,))
        return o_start, o_end, o_type

    @staticmethod
    def _span_position_mask(smap: SentenceMap, n: int) -> np.ndarray:
        """0 on in-sentence word positions, -inf elsewhere (incl. placeholders)."""
        mask = np.full(n, -np.inf)
        mask[smap.token_to_sentence != NONE_SENTENCE] = 0.0
        mask[smap.placeholder_positions] = -np.inf
        return mask

    # -- full pass ---------------------------------------------------------

    def forward(self, seq: TokenSequence, smap: SentenceMap,
                gold_z: EvidenceSelection | None = None,
                train=False, rng=None) -> ReaderOutput:
        n = len(seq)
        sasa = build_sasa_mask(smap, n)
        mf = reader_match_flags(seq, smap, self.vocab)
        enc = encode(seq.ids, sasa.entries, self.enc_params, self.enc_config, train, rng,
                     match_flags=mf)
        o_sent = self.predict_sentences(
            enc.hidden, smap, sentence_match_matrix(seq, smap, self.vocab), train, rng)
        if gold_z is not None:
            z = gold_z
        else:
            probs = 1.0 / (1.0 + np.exp(-o_sent.data))
            z = EvidenceSelection([int(p > self.config.sent_threshold) for p in probs])
        o_start, o_end, o_type = self.predict_answer(
            enc.hidden, smap, z, mf, token_match_matrix(seq, smap, self.vocab), train, rng)
        return ReaderOutput(o_sent, o_start, o_end, o_type, z)

    def joint_loss(self, output: ReaderOutput, gold: ReaderGold) -> Tensor:
        c = self.config
        l_sent = T.binary_cross_entropy_loss(output.o_sent, gold.sent_flags)
        total = T.scale(l_sent, c.lambda1)
        if gold.type_index == TYPE_SPAN:
            if gold.start is None or gold.end is None:
                raise ValueError("span example without gold span indices")
            l_span = T.add(T.cross_entropy_loss(output.o_start, gold.start),
                           T.cross_entropy_loss(output.o_end, gold.end))
            total = T.add(total, T.scale(l_span, c.lambda2))
        l_type = T.cross_entropy_loss(output.o_type, gold.type_index)
        return T.add(total, T.scale(l_type, c.lambda3))


def decode_prediction(output: ReaderOutput, smap: SentenceMap, seq: TokenSequence,
                      titles: list[str], config: ReaderConfig) -> Prediction:
    """Pick yes/no from the type head or the best in-sentence span otherwise."""
    sp = {(titles[smap.owners[i][0]], smap.owners[i][1])
          for i, flag in enumerate(output.z.z) if flag}
    type_idx = int(np.argmax(output.o_type.data))
    if type_idx == TYPE_YES:
        return Prediction("yes", sp)
    if type_idx == TYPE_NO:
        return Prediction("no", sp)
    best = best_span(output.o_start.data, output.o_end.data, smap, config.max_answer_len)
    if best is None:
        # no valid span at all; fall back to the stronger yes/no type
        text = "yes" if output.o_type.data[TYPE_YES] >= output.o_type.data[TYPE_NO] else "no"
        return Prediction(text, sp)
    i, j = best
    return Prediction(" ".join(seq.tokens[i:j + 1]), sp)


def best_span(start_logits: np.ndarray, end_logits: np.ndarray, smap: SentenceMap,
              max_answer_len: int) -> tuple[int, int] | None:
    """Argmax of start+end over i <= j within one sentence, j-i < max_answer_len."""
    best, best_score = None, -np.inf
    for (s, e) in smap.sentence_spans:
        for i in range(s, e):
            if not np.isfinite(start_logits[i]):
                continue
            hi = min(e, i + max_answer_len)
            for j in range(i, hi):
                if not np.isfinite(end_logits[j]):
                    continue
                score = start_logits[i] + end_logits[j]
                if score > best_score:
                    best, best_score = (i, j), score
    return best
