"""Dataset ingestion, a seeded synthetic multi-hop corpus, and the metric suite.

Files use the public distractor-format schema (array of objects with _id,
question, answer, context, supporting_facts), so synthetic and real data flow
through identical code paths.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .textproc import split_text


class DatasetError(ValueError):
    pass


@dataclass
class MhrcExample:
    id: str
    question: str
    answer: str
    context: list[tuple[str, list[str]]]  # (title, sentences)
    supporting_facts: set[tuple[str, int]]
    answer_type: str  # span | yes | no

    def gold_titles(self) -> set[str]:
        return {t for t, _ in self.supporting_facts}


def _answer_type(answer: str) -> str:
    return answer if answer in ("yes", "no") else "span"


def _validate(ex: MhrcExample, index: int) -> None:
    titles = {t: len(s) for t, s in ex.context}
    for t, i in ex.supporting_facts:
        if t not in titles:
            raise DatasetError(f"record {index} ({ex.id}): supporting fact cites missing title {t!r}")
        if not 0 <= i < titles[t]:
            raise DatasetError(f"record {index} ({ex.id}): supporting fact sentence {i} out of range for {t!r}")
    if ex.answer_type == "span":
        sents = {s for t, sl in ex.context for j, s in enumerate(sl) if (t, j) in ex.supporting_facts}
        ans = split_text(ex.answer)
        if not any(_contains(split_text(s), ans) for s in sents):
            raise DatasetError(f"record {index} ({ex.id}): answer not found in any supporting sentence")


def _contains(haystack: list[str], needle: list[str]) -> bool:
    if not needle:
        return False
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def load_distractor_dataset(path) -> list[MhrcExample]:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"dataset {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise DatasetError(f"dataset {path}: expected a JSON array")
    examples = []
    for i, rec in enumerate(raw):
        try:
            ex = MhrcExample(
                id=rec["_id"],
                question=rec["question"],
                answer=rec["answer"],
                context=[(t, list(s)) for t, s in rec["context"]],
                supporting_facts={(t, int(j)) for t, j in rec["supporting_facts"]},
                answer_type=_answer_type(rec["answer"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"record {i}: malformed ({exc})") from exc
        _validate(ex, i)
        examples.append(ex)
    return examples


def save_distractor_dataset(examples: list[MhrcExample], path) -> None:
    recs = []
    for ex in examples:
        recs.append({
            "_id": ex.id,
            "question": ex.question,
            "answer": ex.answer,
            "context": [[t, s] for t, s in ex.context],
            "supporting_facts": [[t, j] for t, j in sorted(ex.supporting_facts)],
        })
    with open(path, "w", encoding="utf-8") as f:
        json.dump(recs, f, ensure_ascii=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    seed: int = 42
    n_examples: int = 100
    n_paragraphs_per_example: int = 10
    entity_vocab_size: int = 150
    fraction_comparison: float = 0.2
    max_fillers: int = 3  # raise to exercise the sentence cap
    entity_seed: int | None = None  # shared across splits so dev stays in-vocabulary

    def effective_entity_seed(self) -> int:
        return self.seed if self.entity_seed is None else self.entity_seed


_CONS = "bdfgklmnprstvz"
_VOW = "aeiou"

_CREATE = "{a} was created by {b} ."
_BIRTH = "{a} was born in {b} ."
# the first two and last three templates share no words, so paragraphs built
# from different halves only ever overlap on entity mentions
_FILLERS = [
    "{e} is a quiet town .",
    "{e} won a small award .",
    "{e} has many visitors .",
    "{e} opened new museums .",
    "{e} joined local clubs .",
]


def _make_entities(rng: np.random.Generator, count: int) -> list[str]:
    names: list[str] = []
    seen = set()
    while len(names) < count:
        name = "".join(_CONS[rng.integers(len(_CONS))] + _VOW[rng.integers(len(_VOW))]
                       for _ in range(3))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def _paragraph(rng, relation: str, pool: list[str], max_fillers: int,
               fillers: list[str] = _FILLERS) -> tuple[list[str], int]:
    """Relation sentence plus 0..max_fillers fillers; returns (sentences, relation idx)."""
    n_fill = int(rng.integers(0, max_fillers + 1))
    sents = [fillers[rng.integers(len(fillers))].format(e=pool[rng.integers(len(pool))])
             for _ in range(n_fill)]
    pos = int(rng.integers(0, len(sents) + 1))
    sents.insert(pos, relation)
    return sents, pos


def generate_synthetic(spec: SyntheticSpec) -> list[MhrcExample]:
    """Bridge and comparison examples over a random entity vocabulary.

    Bridge chain: gold A states `E1 was created by E2`, gold B states `E2 was
    born in E3`; the question asks where E1's creator was born. The bridge
    entity E2 never appears in the question, and most distractors are born-in
    lookalikes, so lexical overlap alone cannot single out gold B. A decoy
    entity appears in both gold paragraphs with its own born-in sentence, so
    cross-paragraph repetition alone cannot single out the answer span either.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.entity_vocab_size < 40:
        raise ValueError("entity vocabulary too small (need >= 40)")
    entities = _make_entities(np.random.default_rng(spec.effective_entity_seed()),
                              spec.entity_vocab_size)
    n = spec.n_examples
    n_comp = int(round(spec.fraction_comparison * n))
    examples = []
    for i in range(n):
        is_comp = (i * n_comp) // n != ((i + 1) * n_comp) // n
        pool = [entities[j] for j in rng.choice(spec.entity_vocab_size, size=40, replace=False)]
        if is_comp:
            examples.append(_gen_comparison(rng, f"syn-{spec.seed}-{i:05d}", pool, spec))
        else:
            examples.append(_gen_bridge(rng, f"syn-{spec.seed}-{i:05d}", pool, spec))
    return examples


def _distractors(rng, pool, count: int, spec) -> list[tuple[str, list[str]]]:
    """Paragraphs over disjoint entities that mimic the gold relation patterns.

    Born-in paragraphs dominate the mix so the answer paragraph stays lost in
    a crowd of lookalikes until the bridge entity is known; the distractor
    entities never overlap the question or the gold chain.
    """
    out = []
    free = list(pool)
    for j in range(count):
        d1, d2 = free.pop(), free.pop()
        if j % 3 == 2:
            sents, _ = _paragraph(rng, _CREATE.format(a=d1, b=d2),
                                  pool[-6:], spec.max_fillers)
        else:
            sents, _ = _paragraph(rng, _BIRTH.format(a=d1, b=d2),
                                  pool[-6:], spec.max_fillers)
            # twin born-in sentence so the answer paragraph is not the only
            # one with two birthplace statements (or the longest body)
            d3, d4 = free.pop(), free.pop()
            k = int(rng.integers(0, len(sents) + 1))
            sents.insert(k, _BIRTH.format(a=d3, b=d4))
        out.append((d1, sents))
    return out


def _finish(rng, ex_id, question, answer, golds, gold_sp, distractors) -> MhrcExample:
    paragraphs = golds + distractors
    order = rng.permutation(len(paragraphs))
    context = [paragraphs[j] for j in order]
    return MhrcExample(
        id=ex_id, question=question, answer=answer, context=context,
        supporting_facts=set(gold_sp), answer_type=_answer_type(answer))


def _gen_bridge(rng, ex_id, pool, spec) -> MhrcExample:
    e1, e2, e3 = pool[0], pool[1], pool[2]
    rest = pool[3:]
    sents_a, pos_a = _paragraph(rng, _CREATE.format(a=e1, b=e2), rest[:3],
                                spec.max_fillers, _FILLERS[:2])
    sents_b, pos_b = _paragraph(rng, _BIRTH.format(a=e2, b=e3), rest[3:6],
                                spec.max_fillers, _FILLERS[2:])
    # decoy chain: d1 is mentioned in both paragraphs (a filler in A, a second
    # born-in sentence in B), so "appears in both paragraphs" alone cannot
    # tell E2's birthplace from d1's; the reader has to follow which entity is
    # the created-by object of the question entity
    d1, d2 = rest[6], rest[7]
    ia = int(rng.integers(0, len(sents_a) + 1))
    sents_a.insert(ia, _FILLERS[1].format(e=d1))
    if ia <= pos_a:
        pos_a += 1
    ib = int(rng.integers(0, len(sents_b) + 1))
    sents_b.insert(ib, _BIRTH.format(a=d1, b=d2))
    if ib <= pos_b:
        pos_b += 1
    golds = [(e1, sents_a), (e2, sents_b)]
    sp = [(e1, pos_a), (e2, pos_b)]
    dis = _distractors(rng, rest[8:], spec.n_paragraphs_per_example - 2, spec)
    question = f"where was the creator of {e1} born ?"
    return _finish(rng, ex_id, question, e3, golds, sp, dis)


def _gen_comparison(rng, ex_id, pool, spec) -> MhrcExample:
    x, y, p = pool[0], pool[1], pool[2]
    same = bool(rng.integers(0, 2))
    p2 = p if same else pool[3]
    rest = pool[4:]
    sents_x, pos_x = _paragraph(rng, _CREATE.format(a=x, b=p), rest[:3],
                                spec.max_fillers, _FILLERS[:2])
    sents_y, pos_y = _paragraph(rng, _CREATE.format(a=y, b=p2), rest[3:6],
                                spec.max_fillers, _FILLERS[2:])
    golds = [(x, sents_x), (y, sents_y)]
    sp = [(x, pos_x), (y, pos_y)]
    dis = _distractors(rng, rest[6:], spec.n_paragraphs_per_example - 2, spec)
    question = f"was {x} created by the same person as {y} ?"
    return _finish(rng, ex_id, question, "yes" if same else "no", golds, sp, dis)


def lexical_topk(question: str, context: list[tuple[str, list[str]]], k: int = 2) -> list[int]:
    """Question-word-overlap baseline; the hardness oracle for the generator."""
    q = set(split_text(question))
    scores = [len(q & set(split_text(" ".join(s)))) for _, s in context]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def normalize_answer(s: str) -> str:
    """Lower text; remove punctuation, articles and extra whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in set(string.punctuation))
    s = re.sub(r"\b(a|an|the)\b", " ", s)
    return " ".join(s.split())


def answer_prf(prediction: str, gold: str) -> tuple[float, float, float, float]:
    """(em, f1, precision, recall) over normalized answer tokens."""
    em = float(normalize_answer(prediction) == normalize_answer(gold))
    # yes/no/span mismatches score 0, as in the benchmark scorer
    p_norm, g_norm = normalize_answer(prediction), normalize_answer(gold)
    if p_norm in ("yes", "no") or g_norm in ("yes", "no"):
        if p_norm != g_norm:
            return em, 0.0, 0.0, 0.0
    p_toks, g_toks = p_norm.split(), g_norm.split()
    common = Counter(p_toks) & Counter(g_toks)
    num_same = sum(common.values())
    if num_same == 0:
        return em, 0.0, 0.0, 0.0
    prec = num_same / len(p_toks)
    rec = num_same / len(g_toks)
    return em, 2 * prec * rec / (prec + rec), prec, rec


def answer_em_f1(prediction: str, gold: str) -> tuple[float, float]:
    em, f1, _, _ = answer_prf(prediction, gold)
    return em, f1


def sup_prf(pred_sp, gold_sp) -> tuple[float, float, float, float]:
    pred_sp, gold_sp = set(map(tuple, pred_sp)), set(map(tuple, gold_sp))
    em = float(pred_sp == gold_sp)
    common = len(pred_sp & gold_sp)
    if common == 0:
        return em, 0.0, 0.0, 0.0
    prec = common / len(pred_sp)
    rec = common / len(gold_sp)
    return em, 2 * prec * rec / (prec + rec), prec, rec


def sup_em_f1(pred_sp, gold_sp) -> tuple[float, float]:
    em, f1, _, _ = sup_prf(pred_sp, gold_sp)
    return em, f1


def joint_metrics(ans: tuple[float, float, float, float],
                  sup: tuple[float, float, float, float]) -> tuple[float, float]:
    """Benchmark combination: EM product; F1 from products of precision/recall."""
    joint_em = ans[0] * sup[0]
    jp = ans[2] * sup[2]
    jr = ans[3] * sup[3]
    joint_f1 = 2 * jp * jr / (jp + jr) if jp + jr > 0 else 0.0
    return joint_em, joint_f1


def retrieval_metrics(selected_titles, gold_titles, answer_title) -> tuple[float, float, float]:
    """(em, f1, gold) for a top-2 selection against the 2 gold paragraphs."""
    sel, gold = set(selected_titles), set(gold_titles)
    common = len(sel & gold)
    em = float(sel == gold)
    f1 = 0.0
    if common:
        prec = common / len(sel)
        rec = common / len(gold)
        f1 = 2 * prec * rec / (prec + rec)
    has_gold = float(answer_title in sel) if answer_title is not None else float(common > 0)
    return em, f1, has_gold


@dataclass
class MetricReport:
    ans_em: float = 0.0
    ans_f1: float = 0.0
    sup_em: float = 0.0
    sup_f1: float = 0.0
    joint_em: float = 0.0
    joint_f1: float = 0.0
    retrieval_em: float | None = None
    retrieval_f1: float | None = None
    retrieval_gold: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    def table(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.4f}"
        rows = [("Ans", self.ans_em, self.ans_f1), ("Sup", self.sup_em, self.sup_f1),
                ("Joint", self.joint_em, self.joint_f1),
                ("Retrieval", self.retrieval_em, self.retrieval_f1)]
        lines = [f"{'task':<10}{'EM':>10}{'F1':>10}"]
        lines += [f"{name:<10}{fmt(em):>10}{fmt(f1):>10}" for name, em, f1 in rows]
        lines.append(f"{'Gold':<10}{fmt(self.retrieval_gold):>10}")
        return "\n".join(lines)


def evaluate_predictions(answers: dict[str, str], sp: dict[str, list],
                         gold: list[MhrcExample],
                         selections: dict[str, list[str]] | None = None) -> MetricReport:
    """Aggregate Ans/Sup/Joint metrics; retrieval metrics when selections given."""
    gold_ids = {ex.id for ex in gold}
    missing = sorted(gold_ids - set(answers)) + sorted(gold_ids - set(sp))
    if missing:
        raise DatasetError(f"prediction file missing ids: {missing[:10]}")
    rep = MetricReport()
    ret = [0.0, 0.0, 0.0]
    for ex in gold:
        a = answer_prf(answers[ex.id], ex.answer)
        s = sup_prf(sp[ex.id], ex.supporting_facts)
        j = joint_metrics(a, s)
        rep.ans_em += a[0]
        rep.ans_f1 += a[1]
        rep.sup_em += s[0]
        rep.sup_f1 += s[1]
        rep.joint_em += j[0]
        rep.joint_f1 += j[1]
        if selections is not None:
            ans_title = _answer_paragraph_title(ex)
            em, f1, g = retrieval_metrics(selections[ex.id], ex.gold_titles(), ans_title)
            ret[0] += em
            ret[1] += f1
            ret[2] += g
    n = max(len(gold), 1)
    for f in ("ans_em", "ans_f1", "sup_em", "sup_f1", "joint_em", "joint_f1"):
        setattr(rep, f, getattr(rep, f) / n)
    if selections is not None:
        rep.retrieval_em, rep.retrieval_f1, rep.retrieval_gold = (v / n for v in ret)
    return rep


def _answer_paragraph_title(ex: MhrcExample) -> str | None:
    if ex.answer_type != "span":
        return None
    ans = split_text(ex.answer)
    for t, sents in ex.context:
        if (t in ex.gold_titles()
                and any(_contains(split_text(s), ans) for s in sents)):
            return t
    return None
