"""Global self-attention blocks, conv+maxpool downsampling, and the pooling head."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Conv2d, FeedForward, LayerNorm, Linear, Module, Parameter, drop_path, trunc_normal
from .shift_embed import ConfigError, feature_map_to_tokens, tokens_to_feature_map
from .tensor import Tensor

SCORE_TAG = "global_scores"


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Parameter(trunc_normal(rng, (dim, 3 * dim), 0.02, dtype))
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n, b, d = x.shape
        h = self.heads
        dh = d // h
        qkv = T.matmul(x, self.qkv).reshape(n, b, 3, h, dh).transpose(2, 0, 3, 1, 4)  # 3 N h B dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        with T.op_tag(SCORE_TAG):
            scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))     # N h B B
            w = T.softmax(scores, axis=-1)
            mixed = T.matmul(w, v)                                                   # N h B dh
        return self.proj(mixed.transpose(0, 2, 1, 3).reshape(n, b, d))


class GlobalBlock(Module):
    """Pre-norm multi-head self-attention followed by an FFN, both residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, rng, ratio=mlp_ratio, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        x = x + drop_path(self.attn(self.norm1(x)))
        x = x + drop_path(self.ffn(self.norm2(x)))
        return x.reshape(x.shape[1:]) if squeeze else x


def global_block(tokens: Tensor, params: GlobalBlock) -> Tensor:
    return params(tokens)


def pooled_extent(n: int) -> int:
    """Grid extent after the 3x3 / stride 2 / pad 1 max-pool."""
    return (n - 1) // 2 + 1


class Downsample(Module):
    """Token grid -> 3x3 conv (stride 1, pad 1) -> 3x3 max-pool (stride 2, pad 1) -> tokens."""

    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(dim_in, dim_out, 3, rng, stride=1, padding=1, dtype=dtype)

    def forward(self, tokens: Tensor, grid: tuple[int, int]) -> tuple[Tensor, tuple[int, int]]:
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens.reshape((1,) + tokens.shape)
        bh, bw = grid
        if tokens.shape[1] != bh * bw:
            raise ValueError(f"{tokens.shape[1]} tokens do not fill a {bh}x{bw} grid")
        fmap = T.maxpool2d(self.conv(tokens_to_feature_map(tokens, grid)), 3, 2, 1)
        out = feature_map_to_tokens(fmap)
        new_grid = (fmap.shape[2], fmap.shape[3])
        return (out.reshape(out.shape[1:]) if squeeze else out), new_grid


def downsample(tokens: Tensor, grid: tuple[int, int], params: Downsample):
    return params(tokens, grid)


class ClassifierHead(Module):
    """Final LayerNorm, mean over tokens, linear map to class logits."""

    def __init__(self, dim: int, classes: int, rng: np.random.Generator, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.fc = Linear(dim, classes, rng, dtype=dtype)

    def forward(self, tokens: Tensor, normalize: bool = True) -> Tensor:
        x = self.norm(tokens) if normalize else tokens
        logits = self.fc(x.mean(axis=-2, keepdims=True))
        return logits.reshape(logits.shape[:-2] + logits.shape[-1:])


def classifier_head(tokens: Tensor, params: ClassifierHead, normalize: bool = True) -> Tensor:
    return params(tokens, normalize)
