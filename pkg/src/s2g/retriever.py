"""Three-stage evidence-paragraph retrieval.

Stage 1 scores each (question, paragraph) pair and matches the softmaxed
heuristic score target under a KL objective. Stage 2 refines the ranking with
a bi-attention hop from the first-hop paragraph. Stage 3 re-ranks the top-3
in a single concatenated pass with <p> markers. The final output is the
ordered top-2 paragraph pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import (EncoderConfig, apply_layer, apply_mlp, bi_attention, encode,
                      init_bi_attention_params, init_layer_params, init_mlp_params)
from .masks import build_full_mask
from .tensor import Tensor
from .textproc import (TokenSequence, Vocab, assemble_cascade_input,
                       assemble_retriever_input, evidence_token_ids,
                       exact_match_matrix, question_match_flags,
                       reformulation_mask)


@dataclass
class ParagraphCandidate:
    title: str
    sentences: list[str]
    has_answer: bool | None = None  # training only
    is_relevant: bool | None = None

    def text(self) -> str:
        return " ".join(self.sentences)


@dataclass
class RetrieverConfig:
    top_k_cascade: int = 3
    score_has_answer: int = 2
    score_relevant: int = 1
    score_irrelevant: int = 0
    n_refine_layers: int = 2
    use_refine: bool = True
    use_cascade: bool = True
    use_reformulation: bool = True  # False: per-paragraph binary CE instead of KL

    def __post_init__(self):
        if self.top_k_cascade < 2:
            raise ValueError("top_k_cascade must be >= 2")


@dataclass
class RetrievalState:
    initial_logits: Tensor
    refined_logits: Tensor | None = None
    cascaded_logits: Tensor | None = None
    first_hop_index: int | None = None
    top_k_indices: list[int] = field(default_factory=list)
    selected: tuple[int, int] | None = None


def assign_target_scores(paragraphs: list[ParagraphCandidate],
                         config: RetrieverConfig = RetrieverConfig()) -> list[int]:
    scores = []
    for p in paragraphs:
        if p.has_answer is None or p.is_relevant is None:
            raise ValueError(f"paragraph {p.title!r} is missing training labels")
        if p.has_answer:
            scores.append(config.score_has_answer)
        elif p.is_relevant:
            scores.append(config.score_relevant)
        else:
            scores.append(config.score_irrelevant)
    return scores


def target_distribution(scores: list[int]) -> Tensor:
    if not scores:
        raise ValueError("empty score list")
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return Tensor(e / e.sum())


def _argsort_desc(values: np.ndarray) -> list[int]:
    # ties break toward the lower original index
    return sorted(range(len(values)), key=lambda i: (-values[i], i))


class Retriever:
    """Owns the stage-specific parameters on top of a (shared) encoder."""

    def __init__(self, enc_params: dict, enc_config: EncoderConfig,
                 config: RetrieverConfig, vocab: Vocab, rng: np.random.Generator):
        self.enc_params = enc_params
        self.enc_config = enc_config
        self.config = config
        self.vocab = vocab
        d, dff = enc_config.d_model, enc_config.d_ff
        p: dict[str, Tensor] = {}
        init_layer_params(p, "ret.init", d, dff, rng)
        init_mlp_params(p, "ret.init_head", [d, 1], rng)
        if config.use_refine:
            init_bi_attention_params(p, "ret.biatt", d, rng)
            for i in range(config.n_refine_layers):
                init_layer_params(p, f"ret.ref{i}", d, dff, rng)
            # d fused features plus the raw count of tokens shared with the
            # first hop: the count is the decisive second-hop cue, and fed
            # straight to the head it stays linear instead of having to
            # survive attention pooling (which makes training seed-dependent)
            init_mlp_params(p, "ret.ref_head", [d + 1, 1], rng)
        if config.use_cascade:
            init_mlp_params(p, "ret.cas_head", [d, d, 1], rng)
        self.params = p

    def all_params(self) -> dict[str, Tensor]:
        return {**self.enc_params, **self.params}

    # -- stage 1 -----------------------------------------------------------

    def score_paragraphs_initial(self, question: str, paragraphs: list[ParagraphCandidate],
                                 train=False, rng=None) -> tuple[Tensor, list[Tensor]]:
        if not 2 <= len(paragraphs):
            raise ValueError("need at least 2 candidate paragraphs")
        hiddens, pooled, seqs = [], [], []
        for para in paragraphs:
            seq = assemble_retriever_input(question, para.text(), self.vocab,
                                           self.enc_config.max_len)
            flags = question_match_flags(seq, self.vocab)
            out = encode(seq.ids, None, self.enc_params, self.enc_config, train, rng,
                         match_flags=flags)
            hiddens.append(out.hidden)
            seqs.append(seq)
            pooled.append(T.reshape(out.pooled, (1, self.enc_config.d_model)))
        stack = T.concat(pooled, axis=0)  # (n_para, d); no position embedding
        h = apply_layer(stack, None, self.params, "ret.init", self.enc_config.n_heads,
                        self.enc_config.dropout_rate if train else 0.0, rng)
        logits = T.reshape(apply_mlp(h, self.params, "ret.init_head", 1), (len(paragraphs),))
        return logits, hiddens, seqs

    # -- stage 2 -----------------------------------------------------------

    def refine_scores(self, state: RetrievalState, hiddens: list[Tensor],
                      seqs: list[TokenSequence] | None = None,
                      train=False, rng=None,
                      forced_first_hop: int | None = None) -> Tensor:
        if state.initial_logits is None:
            raise ValueError("refine requires the initial stage")
        # teacher forcing: the trainer supplies the gold first hop so this
        # stage learns independently of early initial-stage ranking noise
        if forced_first_hop is not None:
            first_hop = forced_first_hop
        else:
            first_hop = int(np.argmax(state.initial_logits.data))
        state.first_hop_index = first_hop
        query = hiddens[first_hop]
        # tokens occurring across many candidates (filler phrasing, shared
        # templates) identify nothing; an overlap cue is only informative for
        # rare tokens, so drop types present in more than two paragraphs —
        # a document-frequency cutoff playing the role of an IDF weight
        common: set[int] = set()
        ref_mask = None
        if seqs is not None:
            df: dict[int, int] = {}
            for s in seqs:
                for tid in evidence_token_ids(s, self.vocab):
                    df[tid] = df.get(tid, 0) + 1
            common = {tid for tid, c in df.items() if c > 2}
            # reformulated query: only the first-hop tokens around the
            # question overlap carry the follow-up hop (the bridge entity
            # lives in the sentence that answers the question's relation)
            ref_mask = reformulation_mask(seqs[first_hop], self.vocab)
        pooled, counts = [], []
        for i, h in enumerate(hiddens):
            match = None
            if seqs is not None:
                match = exact_match_matrix(seqs[i], seqs[first_hop], self.vocab,
                                           exclude_ids=common) * ref_mask[None, :]
            fused = bi_attention(h, query, self.params, "ret.biatt", match=match)
            pooled.append(T.reshape(T.mean_axis0(fused), (1, self.enc_config.d_model)))
            # overlap with the first hop; trivially large for the first hop
            # itself, where the cue is meaningless, so zero it there
            counts.append(0.0 if (match is None or i == first_hop) else float(match.sum()))
        h = T.concat(pooled, axis=0)
        for i in range(self.config.n_refine_layers):
            h = apply_layer(h, None, self.params, f"ret.ref{i}", self.enc_config.n_heads,
                            self.enc_config.dropout_rate if train else 0.0, rng)
        h = T.concat([h, Tensor(np.asarray(counts).reshape(-1, 1))], axis=1)
        return T.reshape(apply_mlp(h, self.params, "ret.ref_head", 1), (len(hiddens),))

    # -- stage 3 -----------------------------------------------------------

    def cascaded_rerank(self, state: RetrievalState, question: str,
                        paragraphs: list[ParagraphCandidate],
                        train=False, rng=None) -> Tensor:
        base = state.refined_logits if state.refined_logits is not None else state.initial_logits
        k = min(self.config.top_k_cascade, len(paragraphs))
        top = _argsort_desc(base.data)[:k]
        state.top_k_indices = top
        seq, markers = assemble_cascade_input(
            question, [paragraphs[i].text() for i in top], self.vocab, self.enc_config.max_len)
        out = encode(seq.ids, None, self.enc_params, self.enc_config, train, rng,
                     match_flags=question_match_flags(seq, self.vocab))
        marks = T.gather_rows(out.hidden, markers)  # (k, d)
        return T.reshape(apply_mlp(marks, self.params, "ret.cas_head", 2), (k,))

    # -- pipeline ----------------------------------------------------------

    def forward(self, question: str, paragraphs: list[ParagraphCandidate],
                train=False, rng=None,
                forced_first_hop: int | None = None) -> RetrievalState:
        logits, hiddens, seqs = self.score_paragraphs_initial(question, paragraphs, train, rng)
        state = RetrievalState(initial_logits=logits)
        if self.config.use_refine:
            state.refined_logits = self.refine_scores(state, hiddens, seqs, train, rng,
                                                      forced_first_hop)
        if self.config.use_cascade:
            state.cascaded_logits = self.cascaded_rerank(state, question, paragraphs, train, rng)
        select_evidence_paragraphs(state)
        return state

    def loss(self, state: RetrievalState, paragraphs: list[ParagraphCandidate]) -> Tensor:
        scores = assign_target_scores(paragraphs, self.config)
        losses = []
        for logits in (state.initial_logits, state.refined_logits):
            if logits is not None:
                losses.append(self._stage_loss(logits, scores))
        if state.cascaded_logits is not None:
            sub = [scores[i] for i in state.top_k_indices]
            losses.append(self._stage_loss(state.cascaded_logits, sub))
        total = losses[0]
        for extra in losses[1:]:
            total = T.add(total, extra)
        return total

    def _stage_loss(self, logits: Tensor, scores: list[int]) -> Tensor:
        if self.config.use_reformulation:
            return retriever_loss(logits, scores)
        relevant = np.asarray([1.0 if s > 0 else 0.0 for s in scores])
        return T.binary_cross_entropy_loss(logits, relevant)


def retriever_loss(stage_logits: Tensor, target_scores: list[int]) -> Tensor:
    """KL(softmax(logits) || softmaxed score target)."""
    model = T.masked_softmax(stage_logits)
    return T.kl_divergence_loss(model, target_distribution(target_scores))


def select_evidence_paragraphs(state: RetrievalState) -> tuple[int, int]:
    """Top-2 by final-stage score, descending; ties go to the lower index."""
    if state.cascaded_logits is not None:
        order = _argsort_desc(state.cascaded_logits.data)
        pair = (state.top_k_indices[order[0]], state.top_k_indices[order[1]])
    else:
        base = state.refined_logits if state.refined_logits is not None else state.initial_logits
        if base is None or len(base.data) < 2:
            raise ValueError("need at least 2 scored candidates")
        order = _argsort_desc(base.data)
        pair = (order[0], order[1])
    state.selected = pair
    return pair
