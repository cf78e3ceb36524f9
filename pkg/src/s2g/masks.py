"""Additive attention masks: full, sentence-aware (SaSA) and evidence-guided (EGA).

Masks are dense n x n matrices over {0, -inf}, added to pre-softmax attention
logits. SaSA restricts each sentence placeholder to its own sentence plus the
other placeholders; EGA hides tokens of unselected sentences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .textproc import NONE_SENTENCE, SentenceMap

NEG_INF = -np.inf


@dataclass
class AttentionMask:
    n: int
    entries: np.ndarray  # (n, n) over {0, -inf}

    def to_debug_grid(self) -> str:
        """`.` for attended (0), `#` for masked (-inf)."""
        rows = ["".join("." if v == 0.0 else "#" for v in row) for row in self.entries]
        return "\n".join(rows)


@dataclass
class EvidenceSelection:
    z: list[int]  # one binary flag per mapped sentence


def build_full_mask(n: int) -> AttentionMask:
    if n < 1:
        raise ValueError("mask size must be >= 1")
    return AttentionMask(n, np.zeros((n, n)))


def _check_map(smap: SentenceMap, n: int) -> np.ndarray:
    sig = smap.token_to_sentence
    if len(sig) != n:
        raise ValueError(f"sentence map covers {len(sig)} tokens, mask size is {n}")
    return sig


def build_sasa_mask(smap: SentenceMap, n: int) -> AttentionMask:
    """Pair (i,j) attends iff both are placeholders, both are ordinary tokens,
    or they belong to the same sentence (placeholders included in their own)."""
    sig = _check_map(smap, n)
    is_s = np.zeros(n, dtype=bool)
    is_s[smap.placeholder_positions] = True
    both_s = is_s[:, None] & is_s[None, :]
    both_w = ~is_s[:, None] & ~is_s[None, :]
    same_sent = (sig[:, None] == sig[None, :]) & (sig[:, None] != NONE_SENTENCE)
    allowed = both_s | both_w | same_sent
    return AttentionMask(n, np.where(allowed, 0.0, NEG_INF))


def build_ega_mask(smap: SentenceMap, selection: EvidenceSelection, n: int) -> AttentionMask:
    """Mask out any pair touching an unselected sentence.

    Two amendments keep softmax well-defined: tokens with sigma NONE
    (question/specials) count as selected, and the diagonal is forced to 0.
    """
    sig = _check_map(smap, n)
    z = np.asarray(selection.z, dtype=np.int64)
    if len(z) != smap.n_sentences:
        raise ValueError(f"selection has {len(z)} flags for {smap.n_sentences} sentences")
    selected = np.ones(n, dtype=bool)
    mapped = sig != NONE_SENTENCE
    selected[mapped] = z[sig[mapped]] == 1
    allowed = selected[:, None] & selected[None, :]
    np.fill_diagonal(allowed, True)
    return AttentionMask(n, np.where(allowed, 0.0, NEG_INF))
