"""Attention softmax kernels: compiled extension when available, numpy otherwise.

Set S2G_FORCE_NUMPY=1 to skip the compiled path (used by the benchmark and to
cross-check both backends against each other).
"""

import os

import numpy as np


class FullyMaskedRowError(ValueError):
    """Every entry of a softmax row was masked out."""


def masked_softmax_rows_numpy(logits, mask=None):
    """Row-wise softmax of a (rows, n) array with an optional additive mask."""
    x = logits if mask is None else logits + mask
    rowmax = np.max(x, axis=1, keepdims=True)
    if not np.isfinite(rowmax).all():
        bad = int(np.argmax(~np.isfinite(rowmax[:, 0])))
        raise FullyMaskedRowError(f"fully masked softmax row {bad}")
    e = np.exp(x - rowmax)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward_rows_numpy(probs, grad_out):
    dot = np.sum(probs * grad_out, axis=1, keepdims=True)
    return probs * (grad_out - dot)


_compiled = None
if not os.environ.get("S2G_FORCE_NUMPY"):
    try:
        from . import _attnkern as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def masked_softmax_rows(logits, mask=None):
    if _compiled is not None:
        try:
            return _compiled.masked_softmax_rows(logits, mask)
        except ValueError as exc:
            if "fully masked" in str(exc):
                raise FullyMaskedRowError(str(exc)) from None
            raise
    return masked_softmax_rows_numpy(logits, mask)


def softmax_backward_rows(probs, grad_out):
    if _compiled is not None:
        return _compiled.softmax_backward_rows(probs, grad_out)
    return softmax_backward_rows_numpy(probs, grad_out)
