"""From-scratch transformer encoder with pluggable additive attention masks.

Pre-norm residual blocks, learned absolute position embeddings, GELU
feed-forward. Parameters live in a flat name->Tensor dict so the retriever
and reader can graft their own layers next to the shared encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 512
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


@dataclass
class EncoderOutput:
    hidden: Tensor  # (seq_len, d_model)
    pooled: Tensor  # (d_model,), first-token representation


def init_layer_params(params: dict, prefix: str, d_model: int, d_ff: int,
                      rng: np.random.Generator, std: float = 0.02,
                      match: bool = False) -> None:
    """One pre-norm transformer block: attention + feed-forward. With
    ``match`` the block also owns a learned scalar that biases its attention
    logits on an exact-match matrix (identity-guided attention)."""
    if match:
        params[f"{prefix}.match"] = Tensor(np.ones((1, 1)), requires_grad=True)
    for name, shape in [
        ("wq", (d_model, d_model)), ("wk", (d_model, d_model)),
        ("wv", (d_model, d_model)), ("wo", (d_model, d_model)),
        ("w1", (d_model, d_ff)), ("w2", (d_ff, d_model)),
    ]:
        params[f"{prefix}.{name}"] = T.init_normal(rng, shape, std)
    for name, shape in [("bo", (d_model,)), ("b1", (d_ff,)), ("b2", (d_model,))]:
        params[f"{prefix}.{name}"] = Tensor(np.zeros(shape), requires_grad=True)
    for ln in ("ln1", "ln2"):
        params[f"{prefix}.{ln}.g"] = Tensor(np.ones(d_model), requires_grad=True)
        params[f"{prefix}.{ln}.b"] = Tensor(np.zeros(d_model), requires_grad=True)


def init_mlp_params(params: dict, prefix: str, sizes: list[int],
                    rng: np.random.Generator, std: float = 0.02) -> None:
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        params[f"{prefix}.w{i}"] = T.init_normal(rng, (a, b), std)
        params[f"{prefix}.b{i}"] = Tensor(np.zeros(b), requires_grad=True)


def apply_mlp(x: Tensor, params: dict, prefix: str, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = T.add(T.matmul(x, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            x = T.gelu(x)
    return x


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> dict:
    params: dict[str, Tensor] = {}
    params["emb.tok"] = T.init_normal(rng, (config.vocab_size, config.d_model))
    params["emb.pos"] = T.init_normal(rng, (config.max_len, config.d_model))
    # two match channels: query-overlap and cross-paragraph repetition
    params["emb.match"] = T.init_normal(rng, (2, config.d_model))
    for i in range(config.n_layers):
        init_layer_params(params, f"enc{i}", config.d_model, config.d_ff, rng)
    params["final_ln.g"] = Tensor(np.ones(config.d_model), requires_grad=True)
    params["final_ln.b"] = Tensor(np.zeros(config.d_model), requires_grad=True)
    return params


def multi_head_self_attention(hidden: Tensor, mask: np.ndarray | None, params: dict,
                              prefix: str, n_heads: int,
                              match: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention; `mask` is added to logits before softmax
    and `match` through the block's learned exact-match weight."""
    n, d = hidden.shape
    dh = d // n_heads
    q = T.matmul(hidden, params[f"{prefix}.wq"])
    k = T.matmul(hidden, params[f"{prefix}.wk"])
    v = T.matmul(hidden, params[f"{prefix}.wv"])
    # (n, d) -> (heads, n, dh)
    q = T.transpose(T.reshape(q, (n, n_heads, dh)), (1, 0, 2))
    k = T.transpose(T.reshape(k, (n, n_heads, dh)), (1, 0, 2))
    v = T.transpose(T.reshape(v, (n, n_heads, dh)), (1, 0, 2))
    scores = T.scale(T.batched_matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if match is not None:
        if match.shape != (n, n):
            raise T.ShapeError(f"match matrix {match.shape} does not fit sequence length {n}")
        scores = T.add(scores, T.mul(params[f"{prefix}.match"], Tensor(match[None, :, :])))
    probs = T.masked_softmax(scores, None if mask is None else mask[None, :, :])
    ctx = T.batched_matmul(probs, v)
    ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, d))
    return T.add(T.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def apply_layer(hidden: Tensor, mask: np.ndarray | None, params: dict, prefix: str,
                n_heads: int, dropout_rate: float = 0.0,
                rng: np.random.Generator | None = None,
                match: np.ndarray | None = None) -> Tensor:
    h = hidden
    a = multi_head_self_attention(
        T.layer_norm(h, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"]),
        mask, params, prefix, n_heads, match)
    if dropout_rate > 0.0:
        a = T.dropout(a, dropout_rate, rng)
    h = T.add(h, a)
    f = T.layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    f = T.add(T.matmul(T.gelu(T.add(T.matmul(f, params[f"{prefix}.w1"]),
                                    params[f"{prefix}.b1"])),
                       params[f"{prefix}.w2"]),
              params[f"{prefix}.b2"])
    if dropout_rate > 0.0:
        f = T.dropout(f, dropout_rate, rng)
    return T.add(h, f)


def encode(ids: list[int], mask: np.ndarray | None, params: dict, config: EncoderConfig,
           train: bool = False, rng: np.random.Generator | None = None,
           match_flags: np.ndarray | None = None) -> EncoderOutput:
    n = len(ids)
    if n > config.max_len:
        raise T.ShapeError(f"sequence of {n} tokens exceeds max_len {config.max_len}")
    if mask is not None and mask.shape != (n, n):
        raise T.ShapeError(f"mask shape {mask.shape} does not fit sequence length {n}")
    drop = config.dropout_rate if train else 0.0
    h = T.add(T.gather_rows(params["emb.tok"], ids),
              T.gather_rows(params["emb.pos"], np.arange(n)))
    if match_flags is not None:
        # exact-match features: learned vectors added where an evidence token
        # also occurs in the query segment (column 0) or repeats in another
        # paragraph (column 1)
        flags = match_flags.reshape(n, -1)
        emb = T.gather_rows(params["emb.match"], np.arange(flags.shape[1]))
        h = T.add(h, T.matmul(Tensor(flags), emb))
    if drop > 0.0:
        h = T.dropout(h, drop, rng)
    for i in range(config.n_layers):
        h = apply_layer(h, mask, params, f"enc{i}", config.n_heads, drop, rng)
    h = T.layer_norm(h, params["final_ln.g"], params["final_ln.b"])
    pooled = T.reshape(T.gather_rows(h, [0]), (config.d_model,))
    return EncoderOutput(hidden=h, pooled=pooled)


# ---------------------------------------------------------------------------
# BiDAF-style bi-attention
# ---------------------------------------------------------------------------


def init_bi_attention_params(params: dict, prefix: str, d_model: int,
                             rng: np.random.Generator) -> None:
    for name in ("wc", "wq", "wcq"):
        params[f"{prefix}.{name}"] = T.init_normal(rng, (d_model, 1))
    params[f"{prefix}.proj"] = T.init_normal(rng, (4 * d_model, d_model))
    params[f"{prefix}.proj_b"] = Tensor(np.zeros(d_model), requires_grad=True)
    params[f"{prefix}.match"] = Tensor(np.ones((1, 1)), requires_grad=True)


def bi_attention(context: Tensor, query: Tensor, params: dict, prefix: str,
                 match: np.ndarray | None = None) -> Tensor:
    """S(i,j) = w . [c_i; q_j; c_i*q_j]; returns per-context-row fused features.

    Output rows are [c; c~; c*c~; c*q~] projected back to d_model, where c~ is
    context-to-query attention and q~ the max-similarity query-to-context vector.
    `match` is an optional binary exact-match matrix added to the similarity
    through a learned weight, giving the alignment a direct identity channel.
    """
    m, d = context.shape
    nq, _ = query.shape
    if m < 1 or nq < 1:
        raise T.ShapeError("bi_attention needs non-empty context and query")
    s_c = T.matmul(context, params[f"{prefix}.wc"])          # (m, 1)
    s_q = T.transpose(T.matmul(query, params[f"{prefix}.wq"]), (1, 0))  # (1, nq)
    cw = T.mul(context, T.reshape(params[f"{prefix}.wcq"], (1, d)))
    s_cq = T.matmul(cw, T.transpose(query, (1, 0)))          # (m, nq)
    sim = T.add(T.add(s_c, s_q), s_cq)
    if match is not None:
        if match.shape != (m, nq):
            raise T.ShapeError(f"match matrix {match.shape} does not fit ({m}, {nq})")
        sim = T.add(sim, T.mul(params[f"{prefix}.match"], Tensor(match)))
    c2q = T.matmul(T.masked_softmax(sim), query)             # (m, d)
    beta = T.masked_softmax(T.max_axis(sim, axis=1))         # (m,)
    q2c = T.matmul(T.reshape(beta, (1, m)), context)         # (1, d)
    fused = T.concat([context, c2q, T.mul(context, c2q), T.mul(context, q2c)], axis=1)
    return T.add(T.matmul(fused, params[f"{prefix}.proj"]), params[f"{prefix}.proj_b"])
