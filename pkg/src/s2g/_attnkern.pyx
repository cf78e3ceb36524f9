# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused row-wise masked softmax, forward and backward.

This is the hot kernel of every attention layer: the additive 0/-inf mask,
the max-shift, the exponentiation and the normalization are done in one pass
per row instead of four numpy temporaries. `s2g.kernels` falls back to a
numpy implementation when this module is not compiled.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def masked_softmax_rows(logits, mask=None):
    """Softmax over the last axis of a (rows, n) array.

    `mask`, when given, is a (rows, n) additive mask over {0, -inf}.
    Raises ValueError on a fully masked row.
    """
    cdef const double[:, ::1] x = np.ascontiguousarray(logits, dtype=np.float64)
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((rows, n))
    cdef double[:, ::1] o = out
    cdef const double[:, ::1] m = x
    cdef bint has_mask = mask is not None
    cdef Py_ssize_t i, j
    cdef double v, rowmax, s
    cdef Py_ssize_t bad = -1

    if has_mask:
        m = np.ascontiguousarray(mask, dtype=np.float64)
        if m.shape[0] != rows or m.shape[1] != n:
            raise ValueError(
                f"mask shape {(m.shape[0], m.shape[1])} does not match "
                f"logits shape {(rows, n)}")

    with nogil:
        for i in range(rows):
            rowmax = -INFINITY
            for j in range(n):
                v = x[i, j]
                if has_mask:
                    v += m[i, j]
                if v > rowmax:
                    rowmax = v
            if rowmax == -INFINITY:
                bad = i
                break
            s = 0.0
            for j in range(n):
                v = x[i, j]
                if has_mask:
                    v += m[i, j]
                if v == -INFINITY:
                    o[i, j] = 0.0
                else:
                    o[i, j] = exp(v - rowmax)
                    s += o[i, j]
            for j in range(n):
                o[i, j] /= s
    if bad >= 0:
        raise ValueError(f"fully masked softmax row {bad}")
    return out


def softmax_backward_rows(probs, grad_out):
    """d(loss)/d(logits) given softmax probs and d(loss)/d(probs)."""
    cdef const double[:, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef const double[:, ::1] g = np.ascontiguousarray(grad_out, dtype=np.float64)
    cdef Py_ssize_t rows = p.shape[0]
    cdef Py_ssize_t n = p.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((rows, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double dot

    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(n):
                dot += p[i, j] * g[i, j]
            for j in range(n):
                o[i, j] = p[i, j] * (g[i, j] - dot)
    return out
