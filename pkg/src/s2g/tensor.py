"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything above this module (encoder, retriever, reader) is written in these
primitives. Ops record themselves on the active `Tape` when any input requires
grad; `backward(loss)` replays the tape once in reverse and then clears it.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .kernels import FullyMaskedRowError

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "FullyMaskedRowError",
    "NonNormalizedError",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "batched_matmul",
    "reshape",
    "transpose",
    "concat",
    "gather_rows",
    "mean_axis0",
    "max_axis",
    "gelu",
    "sigmoid",
    "layer_norm",
    "dropout",
    "masked_softmax",
    "cross_entropy_loss",
    "binary_cross_entropy_loss",
    "kl_divergence_loss",
    "Adam",
    "init_normal",
    "finite_difference_check",
]


class ShapeError(ValueError):
    pass


class NonNormalizedError(ValueError):
    """KL input does not sum to 1 or has negative entries."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive ops; one backward pass, then cleared."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._used = False

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False


_ACTIVE: Tape | None = None


def active_tape() -> Tape | None:
    return _ACTIVE


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _ACTIVE is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE._nodes.append((out, parents, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`."""
    tape = _ACTIVE
    if tape is None:
        raise RuntimeError("backward() requires an active tape")
    if tape._used:
        raise RuntimeError("backward() already called on this tape")
    if loss.data.shape != ():
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    tape._used = True
    loss.grad = np.ones(())
    for out, parents, fn in reversed(tape._nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for p, g in zip(parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            p.grad += g
    tape._nodes.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                           _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                           _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                           _unbroadcast(g * a.data, b.data.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """(h, m, k) @ (h, k, n) -> (h, m, n)."""
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"batched_matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    return _record(out, (a, b),
                   lambda g: (np.matmul(g, b.data.transpose(0, 2, 1)),
                              np.matmul(a.data.transpose(0, 2, 1), g)))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), back)


def gather_rows(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(table.data[idx])

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), back)


def mean_axis0(a: Tensor) -> Tensor:
    n = a.data.shape[0]
    out = Tensor(a.data.mean(axis=0))
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def max_axis(a: Tensor, axis: int) -> Tensor:
    idx = np.argmax(a.data, axis=axis)
    out = Tensor(np.max(a.data, axis=axis))

    def back(g):
        ga = np.zeros_like(a.data)
        grid = np.indices(out.data.shape)
        full = list(grid)
        full.insert(axis, idx)
        ga[tuple(full)] = g
        return (ga,)

    return _record(out, (a,), back)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        return (g * d,)

    return _record(out, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def back(g):
        n = a.data.shape[-1]
        gx = g * gain.data
        dxhat = gx
        ga = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gbias = _unbroadcast(g, bias.data.shape)
        return (ga, ggain, gbias)

    return _record(out, (a, gain, bias), back)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(a.data * keep)
    return _record(out, (a,), lambda g: (g * keep,))


def masked_softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive 0/-inf mask.

    The mask is a plain array (never differentiated) broadcastable to the
    logits. Masked entries come out exactly 0; a fully masked row raises
    FullyMaskedRowError.
    """
    shp = logits.data.shape
    n = shp[-1]
    x2 = np.ascontiguousarray(logits.data.reshape(-1, n))
    m2 = None
    if mask is not None:
        m2 = np.ascontiguousarray(np.broadcast_to(mask, shp).reshape(-1, n))
    probs = kernels.masked_softmax_rows(x2, m2)
    out = Tensor(probs.reshape(shp))

    def back(g):
        g2 = np.ascontiguousarray(g.reshape(-1, n))
        return (kernels.softmax_backward_rows(probs, g2).reshape(shp),)

    return _record(out, (logits,), back)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy_loss(logits: Tensor, target_index: int) -> Tensor:
    n = logits.data.shape[0]
    if not 0 <= target_index < n:
        raise IndexError(f"target index {target_index} out of range for {n} logits")
    x = logits.data
    m = np.max(x[np.isfinite(x)])
    e = np.exp(x - m)
    z = e.sum()
    p = e / z
    out = Tensor(np.asarray(math.log(z) + m - x[target_index]))

    def back(g):
        gx = p.copy()
        gx[target_index] -= 1.0
        return (gx * g,)

    return _record(out, (logits,), back)


def binary_cross_entropy_loss(logits: Tensor, target_multi_hot) -> Tensor:
    """Mean per-element binary cross entropy with logits."""
    y = np.asarray(target_multi_hot, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ShapeError(f"target shape {y.shape} != logits shape {logits.data.shape}")
    x = logits.data
    # max(x,0) - x*y + log1p(exp(-|x|)) is the stable per-element form
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.asarray(per.mean()))
    n = x.size

    def back(g):
        s = 1.0 / (1.0 + np.exp(-x))
        return ((s - y) / n * g,)

    return _record(out, (logits,), back)


_LOG_CLAMP = 1e-12


def kl_divergence_loss(model_dist: Tensor, target_dist: Tensor) -> Tensor:
    """KL(P || P_hat) = sum_i P_i log(P_i / P_hat_i), with 0*log 0 = 0."""
    p, q = model_dist.data, target_dist.data
    for name, d in (("model", p), ("target", q)):
        if abs(d.sum() - 1.0) > 1e-9 or (d < -1e-12).any():
            raise NonNormalizedError(f"{name} distribution is not normalized (sum={d.sum()})")
    pc = np.maximum(p, _LOG_CLAMP)
    qc = np.maximum(q, _LOG_CLAMP)
    logratio = np.log(pc) - np.log(qc)
    out = Tensor(np.asarray(np.sum(p * logratio)))

    def back(g):
        gp = (logratio + p / pc) * g
        gq = (-p / qc) * g
        return (gp, gq)

    return _record(out, (model_dist, target_dist), back)


# ---------------------------------------------------------------------------
# optimizer / init / gradient checking
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; zeroes grads after each step."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, strict: bool = True):
        """Apply one update. With ``strict=False`` parameters whose gradient is
        unset are skipped (their moments are left untouched); some objectives
        legitimately leave a head out of the graph for a whole batch."""
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                if strict:
                    raise RuntimeError(f"parameter {k!r} has no gradient")
                continue
            m = self._m[k]
            v = self._v[k]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def finite_difference_check(fn, point: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between backward and central-difference gradients."""
    point.requires_grad = True
    point.grad = None
    with Tape():
        loss = fn(point)
        backward(loss)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    point.grad = None

    flat = point.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fplus = fn(point).item()
        flat[i] = orig - epsilon
        fminus = fn(point).item()
        flat[i] = orig
        numeric[i] = (fplus - fminus) / (2.0 * epsilon)
    numeric = numeric.reshape(point.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
