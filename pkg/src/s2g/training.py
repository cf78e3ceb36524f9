"""Training loops, per-example gold construction and dataset-level evaluation."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .corpus import (MhrcExample, MetricReport, evaluate_predictions, retrieval_metrics,
                     _answer_paragraph_title, _contains)
from .encoder import EncoderConfig
from .masks import EvidenceSelection
from .reader import (Reader, ReaderConfig, ReaderGold, TYPE_NO, TYPE_SPAN, TYPE_YES,
                     decode_prediction)
from .retriever import ParagraphCandidate, Retriever, RetrieverConfig, _argsort_desc
from .textproc import Vocab, split_text


class TrainingDivergedError(RuntimeError):
    pass


def candidates_from_example(ex: MhrcExample, labeled: bool = True) -> list[ParagraphCandidate]:
    gold = ex.gold_titles()
    ans = split_text(ex.answer) if ex.answer_type == "span" else None
    out = []
    for title, sents in ex.context:
        relevant = title in gold
        if ans is None:
            has_answer = relevant  # yes/no: both gold paragraphs carry the answer label
        else:
            has_answer = relevant and any(_contains(split_text(s), ans) for s in sents)
        out.append(ParagraphCandidate(title, sents,
                                      has_answer if labeled else None,
                                      relevant if labeled else None))
    return out


def gold_paragraph_pair(ex: MhrcExample, rng: np.random.Generator | None = None
                        ) -> list[tuple[str, list[str]]]:
    """The two gold paragraphs, in random order when training (position robustness)."""
    golds = [(t, s) for t, s in ex.context if t in ex.gold_titles()]
    if len(golds) != 2:
        raise ValueError(f"example {ex.id} has {len(golds)} gold paragraphs, expected 2")
    if rng is not None and rng.integers(0, 2):
        golds.reverse()
    return golds


def build_reader_gold(ex: MhrcExample, seq, smap, titles: list[str]) -> ReaderGold | None:
    k = smap.n_sentences
    flags = np.zeros(k)
    for i, (p_idx, local) in enumerate(smap.owners):
        if (titles[p_idx], local) in ex.supporting_facts:
            flags[i] = 1.0
    if ex.answer_type == "yes":
        return ReaderGold(flags, None, None, TYPE_YES)
    if ex.answer_type == "no":
        return ReaderGold(flags, None, None, TYPE_NO)
    ans = split_text(ex.answer)
    ph = set(smap.placeholder_positions)
    for i, (s, e) in enumerate(smap.sentence_spans):
        if not flags[i]:
            continue
        toks = [seq.tokens[j] for j in range(s, e)]
        for off in range(len(toks) - len(ans) + 1):
            if toks[off:off + len(ans)] == ans and (s + off) not in ph:
                start = s + off
                return ReaderGold(flags, start, start + len(ans) - 1, TYPE_SPAN)
    return None  # answer truncated away; caller skips the example


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _log(logger, **record):
    if logger is not None:
        logger(json.dumps(record))


def teacher_first_hop(paras: list[ParagraphCandidate]) -> int | None:
    """Gold first-hop index for refinement teacher forcing: the gold paragraph
    reachable from the question alone (relevant but not answer-bearing), or
    any gold when both carry the answer."""
    hop1 = [i for i, p in enumerate(paras) if p.is_relevant and not p.has_answer]
    if hop1:
        return hop1[0]
    golds = [i for i, p in enumerate(paras) if p.is_relevant]
    return golds[0] if golds else None


def train_retriever(retriever: Retriever, train_set: list[MhrcExample],
                    dev_set: list[MhrcExample] | None = None, lr: float = 1e-3,
                    batch_size: int = 16, epochs: int = 5, seed: int = 42,
                    logger=None) -> None:
    params = retriever.all_params()
    opt = T.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        total, pending = 0.0, 0
        for idx in order:
            ex = train_set[idx]
            paras = candidates_from_example(ex)
            hop1 = teacher_first_hop(paras)
            with T.Tape():
                state = retriever.forward(ex.question, paras, train=True, rng=rng,
                                          forced_first_hop=hop1)
                loss = retriever.loss(state, paras)
                T.backward(loss)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDivergedError(f"retriever loss is {val} on example {ex.id}")
            total += val
            pending += 1
            if pending == batch_size:
                opt.step()
                pending = 0
        if pending:
            opt.step()
        record = {"event": "epoch", "task": "retriever", "epoch": epoch + 1,
                  "loss": total / len(train_set)}
        if dev_set:
            record.update(evaluate_retriever(retriever, dev_set))
        _log(logger, **record)


def train_reader(reader: Reader, train_set: list[MhrcExample],
                 dev_set: list[MhrcExample] | None = None, lr: float = 1e-3,
                 batch_size: int = 16, epochs: int = 5, seed: int = 42,
                 logger=None) -> None:
    params = reader.all_params()
    opt = T.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        total, pending, used = 0.0, 0, 0
        for idx in order:
            ex = train_set[idx]
            golds = gold_paragraph_pair(ex, rng)
            titles = [t for t, _ in golds]
            seq, smap = reader.assemble(ex.question, [s for _, s in golds])
            gold = build_reader_gold(ex, seq, smap, titles)
            if gold is None:
                continue
            gold_z = EvidenceSelection([int(f) for f in gold.sent_flags])
            with T.Tape():
                out = reader.forward(seq, smap, gold_z=gold_z, train=True, rng=rng)
                loss = reader.joint_loss(out, gold)
                T.backward(loss)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDivergedError(f"reader loss is {val} on example {ex.id}")
            total += val
            used += 1
            pending += 1
            if pending == batch_size:
                opt.step(strict=False)
                pending = 0
        if pending:
            opt.step(strict=False)
        record = {"event": "epoch", "task": "reader", "epoch": epoch + 1,
                  "loss": total / max(used, 1)}
        if dev_set:
            rep = evaluate_reader_gold_paragraphs(reader, dev_set)
            record.update({"ans_em": rep.ans_em, "sup_em": rep.sup_em})
        _log(logger, **record)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_retriever(retriever: Retriever, dataset: list[MhrcExample],
                       threads: int = 1) -> dict:
    """Retrieval EM/F1/Gold of the final stage plus per-stage EM."""
    stage_em = {"initial": 0.0, "refined": 0.0, "cascaded": 0.0}
    em = f1 = gold_hit = 0.0

    def run(ex):
        paras = candidates_from_example(ex, labeled=False)
        return ex, retriever.forward(ex.question, paras)

    for ex, state in _map(run, dataset, threads):
        titles = [t for t, _ in ex.context]
        ans_title = _answer_paragraph_title(ex)
        sel = [titles[i] for i in state.selected]
        m = retrieval_metrics(sel, ex.gold_titles(), ans_title)
        em, f1, gold_hit = em + m[0], f1 + m[1], gold_hit + m[2]
        for name, logits in (("initial", state.initial_logits),
                             ("refined", state.refined_logits)):
            if logits is not None:
                top2 = [titles[i] for i in _argsort_desc(logits.data)[:2]]
                stage_em[name] += retrieval_metrics(top2, ex.gold_titles(), ans_title)[0]
        if state.cascaded_logits is not None:
            order = _argsort_desc(state.cascaded_logits.data)
            top2 = [titles[state.top_k_indices[i]] for i in order[:2]]
            stage_em["cascaded"] += retrieval_metrics(top2, ex.gold_titles(), ans_title)[0]
    n = len(dataset)
    out = {"retrieval_em": em / n, "retrieval_f1": f1 / n, "retrieval_gold": gold_hit / n}
    out.update({f"em_{k}": v / n for k, v in stage_em.items()})
    return out


def evaluate_reader_gold_paragraphs(reader: Reader, dataset: list[MhrcExample],
                                    threads: int = 1) -> MetricReport:
    answers, sp = {}, {}

    def run(ex):
        golds = gold_paragraph_pair(ex)
        titles = [t for t, _ in golds]
        seq, smap = reader.assemble(ex.question, [s for _, s in golds])
        out = reader.forward(seq, smap)
        return ex.id, decode_prediction(out, smap, seq, titles, reader.config)

    for ex_id, pred in _map(run, dataset, threads):
        answers[ex_id] = pred.answer_text
        sp[ex_id] = sorted(pred.supporting_facts)
    return evaluate_predictions(answers, sp, dataset)


def predict_pipeline(retriever: Retriever, reader: Reader, dataset: list[MhrcExample],
                     threads: int = 1) -> tuple[dict, dict, dict, list[dict]]:
    """Retrieve top-2, read, decode. Returns (answers, sp, selections, dump)."""
    answers, sp, selections, dump = {}, {}, {}, []

    def run(ex):
        paras = candidates_from_example(ex, labeled=False)
        state = retriever.forward(ex.question, paras)
        i, j = state.selected
        pair = [(paras[i].title, paras[i].sentences), (paras[j].title, paras[j].sentences)]
        titles = [t for t, _ in pair]
        seq, smap = reader.assemble(ex.question, [s for _, s in pair])
        out = reader.forward(seq, smap)
        pred = decode_prediction(out, smap, seq, titles, reader.config)
        record = {
            "id": ex.id,
            "initial": [round(v, 9) for v in state.initial_logits.data.tolist()],
            "refined": (None if state.refined_logits is None
                        else [round(v, 9) for v in state.refined_logits.data.tolist()]),
            "cascaded": (None if state.cascaded_logits is None
                         else [round(v, 9) for v in state.cascaded_logits.data.tolist()]),
            "selected": titles,
        }
        return ex.id, pred, titles, record

    for ex_id, pred, titles, record in _map(run, dataset, threads):
        answers[ex_id] = pred.answer_text
        sp[ex_id] = sorted(pred.supporting_facts)
        selections[ex_id] = titles
        dump.append(record)
    return answers, sp, selections, dump


def _map(fn, items, threads: int):
    if threads <= 1:
        for item in items:
            yield fn(item)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            yield from pool.map(fn, items)
