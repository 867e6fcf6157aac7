"""Per-patch attention across shift variants.

Queries come only from the identity variant; keys and values come from every
variant. Patch ``i`` never sees the variants of another patch, so the score
work is ``B * T * D`` rather than the ``B**2 * D`` of global attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module, Parameter, trunc_normal
from .shift_embed import ConfigError, VariantEmbedding
from .tensor import Tensor

SCORE_TAG = "local_scores"


@dataclass
class LocalAttnOutput:
    tokens: Tensor      # (N, B, D) or (B, D)
    weights: Tensor     # (N, B, heads, T) or (B, heads, T)


def _batched(tokens: Tensor) -> tuple[Tensor, bool]:
    if tokens.ndim == 3:
        return tokens.reshape((1,) + tokens.shape), True
    return tokens, False


def local_queries(v: VariantEmbedding, u_q: Tensor) -> Tensor:
    """Project the identity-variant tokens: (…, B, D) queries."""
    x = v.tokens[..., 0, :, :]
    return T.matmul(x, u_q)


def local_keys_values(v: VariantEmbedding, u_kv: Tensor) -> tuple[Tensor, Tensor]:
    """Keys and values for every variant, laid out per patch as (…, B, T, D)."""
    z, squeeze = _batched(v.tokens)                      # N T B D
    d = z.shape[-1]
    kv = T.matmul(z, u_kv)                               # N T B 2D
    kv = kv.transpose(0, 2, 1, 3)                        # N B T 2D
    k, val = kv[..., :d], kv[..., d:]
    if squeeze:
        k, val = k.reshape(k.shape[1:]), val.reshape(val.shape[1:])
    return k, val


def local_attention(q: Tensor, k: Tensor, val: Tensor, heads: int,
                    proj: Optional[Linear] = None) -> tuple[Tensor, Tensor]:
    """Softmax over the T variants of each patch, separately per head.

    Returns the pooled tokens (…, B, D), output-projected when ``proj`` is
    given, and the weights (…, B, heads, T).
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, val = (t.reshape((1,) + t.shape) for t in (q, k, val))
    n, b, t_, d = k.shape
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    if q.shape != (n, b, d) or val.shape != k.shape:
        raise T.ShapeError(f"local_attention: q {q.shape}, k {k.shape}, v {val.shape}")
    dh = d // heads
    qh = q.reshape(n, b, heads, 1, dh)
    kh = k.reshape(n, b, t_, heads, dh).transpose(0, 1, 3, 2, 4)     # N B h T dh
    vh = val.reshape(n, b, t_, heads, dh).transpose(0, 1, 3, 2, 4)
    with T.op_tag(SCORE_TAG):
        scores = T.matmul(qh, kh.transpose(0, 1, 2, 4, 3)) * (1.0 / math.sqrt(dh))  # N B h 1 T
        w = T.softmax(scores, axis=-1)
        pooled = T.matmul(w, vh)                                     # N B h 1 dh
    a = pooled.reshape(n, b, d)
    if proj is not None:
        a = proj(a)
    w = w.reshape(n, b, heads, t_)
    if squeeze:
        a, w = a.reshape(a.shape[1:]), w.reshape(w.shape[1:])
    return a, w


class LocalAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.u_q = Parameter(trunc_normal(rng, (dim, dim), 0.02, dtype))
        self.u_kv = Parameter(trunc_normal(rng, (dim, 2 * dim), 0.02, dtype))
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def forward(self, v: VariantEmbedding) -> tuple[Tensor, Tensor]:
        q = local_queries(v, self.u_q)
        k, val = local_keys_values(v, self.u_kv)
        return local_attention(q, k, val, self.heads, self.proj)


class LocalBlock(Module):
    """Pre-norm local attention and FFN, with the identity variant as residual stream."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = LocalAttention(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, rng, ratio=mlp_ratio, dtype=dtype)

    def forward(self, v: VariantEmbedding) -> LocalAttnOutput:
        residual = v.tokens[..., 0, :, :]
        normed = VariantEmbedding(self.norm1(v.tokens), v.grid)
        a, w = self.attn(normed)
        y = residual + a
        out = y + self.ffn(self.norm2(y))
        return LocalAttnOutput(out, w)


def local_block(v: VariantEmbedding, params: LocalBlock) -> LocalAttnOutput:
    return params(v)
