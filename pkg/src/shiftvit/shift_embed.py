"""Shift-variant patch embeddings.

Each variant is the whole image translated by a small pixel offset with
wrap-around, embedded by its own strided convolution, plus a learned
positional table. The identity offset (0, 0) is always variant 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, Parameter, trunc_normal
from .tensor import Tensor


class ConfigError(ValueError):
    """Raised for inconsistent model or shift configuration."""


CIFAR_SHIFTS = (
    (0, 0), (1, 0), (0, 1), (-1, 0), (0, -1), (2, 0), (0, 2), (-2, 0), (0, -2),
    (1, 1), (1, 2), (1, -1), (-1, 1), (-1, 2), (-1, -1), (2, 1), (2, 2), (2, -1),
)
IMAGENET_SHIFTS = (
    (0, 0), (1, 0), (2, 0), (3, 0), (0, 1), (0, 2), (0, 3), (1, 1), (2, 2), (3, 3),
)
AXIS_SHIFTS_9 = (
    (0, 0), (0, 1), (0, 2), (1, 0), (2, 0), (-1, 0), (-2, 0), (0, -1), (0, -2),
)

_SHIFT_SETS = {
    "cifar": CIFAR_SHIFTS,
    "imagenet": IMAGENET_SHIFTS,
    "ablation-9": AXIS_SHIFTS_9,
    "identity": ((0, 0),),
}


@dataclass(frozen=True)
class ShiftSpec:
    """Ordered (Px, Py) pixel offsets; Px is horizontal, Py vertical."""

    shifts: tuple[tuple[int, int], ...]

    def __post_init__(self):
        shifts = tuple((int(px), int(py)) for px, py in self.shifts)
        object.__setattr__(self, "shifts", shifts)
        if not shifts or shifts[0] != (0, 0):
            raise ConfigError(f"first shift must be the identity (0, 0), got {shifts[:1]}")
        if len(set(shifts)) != len(shifts):
            raise ConfigError(f"duplicate shifts in {shifts}")

    def __len__(self) -> int:
        return len(self.shifts)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(self.shifts)

    def __getitem__(self, i) -> tuple[int, int]:
        return self.shifts[i]

    def max_offset(self) -> int:
        return max(max(abs(px), abs(py)) for px, py in self.shifts)

    def to_list(self) -> list[list[int]]:
        return [list(s) for s in self.shifts]

    @classmethod
    def from_list(cls, pairs: Sequence[Sequence[int]]) -> "ShiftSpec":
        return cls(tuple((int(a), int(b)) for a, b in pairs))


def default_shift_set(name: str) -> ShiftSpec:
    """Named offset sets: ``cifar`` (18), ``imagenet`` (10), ``ablation-9``, ``identity``."""
    try:
        return ShiftSpec(_SHIFT_SETS[name])
    except KeyError:
        raise ConfigError(f"unknown shift set {name!r}; expected one of {sorted(_SHIFT_SETS)}") from None


def _check_shift(shape, shift) -> None:
    px, py = shift
    H, W = shape[-2:]
    if abs(px) > W or abs(py) > H:
        raise ValueError(f"shift {shift} out of range for {H}x{W} image")


def shift_image(image: Tensor, shift: tuple[int, int]) -> Tensor:
    """Circularly translate so that ``out[y, x] = image[(y + Py) % H, (x + Px) % W]``.

    Works on C x H x W or N x C x H x W. Undone by the negated shift.
    """
    _check_shift(image.shape, shift)
    px, py = shift
    if px == 0 and py == 0:
        return image
    return T.roll(image, (-py, -px), axis=(-2, -1))


def _reflect_index(n: int, offset: int) -> np.ndarray:
    idx = np.arange(n) + offset
    period = 2 * (n - 1) if n > 1 else 1
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def translate_reflect(image: Tensor, shift: tuple[int, int]) -> Tensor:
    """Translation with mirror padding at the borders (no wrap-around)."""
    _check_shift(image.shape, shift)
    px, py = shift
    if px == 0 and py == 0:
        return image
    H, W = image.shape[-2:]
    rows = _reflect_index(H, py)
    cols = _reflect_index(W, px)
    return T.getitem(image, (Ellipsis, rows[:, None], cols[None, :]))


@dataclass
class VariantEmbedding:
    """Tokens of shape (T, B, D), or (N, T, B, D) for a batch, on a (B_h, B_w) grid."""

    tokens: Tensor
    grid: tuple[int, int]

    @property
    def num_variants(self) -> int:
        return self.tokens.shape[-3]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class PositionalTable:
    """Learned offsets, one (B, D) table per variant or a single shared one."""

    table: Parameter
    per_variant: bool = True

    @classmethod
    def create(cls, num_variants: int, num_tokens: int, dim: int, rng: np.random.Generator,
               per_variant: bool = True, dtype=np.float32) -> "PositionalTable":
        rows = num_variants if per_variant else 1
        return cls(Parameter(trunc_normal(rng, (rows, num_tokens, dim), 0.02, dtype)), per_variant)


def feature_map_to_tokens(fmap: Tensor) -> Tensor:
    """(N, D, B_h, B_w) -> (N, B_h * B_w, D), row-major over the grid."""
    n, d, bh, bw = fmap.shape
    return fmap.reshape(n, d, bh * bw).transpose(0, 2, 1)


def tokens_to_feature_map(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    n, b, d = tokens.shape
    bh, bw = grid
    if b != bh * bw:
        raise ValueError(f"{b} tokens do not fill a {bh}x{bw} grid")
    return tokens.transpose(0, 2, 1).reshape(n, d, bh, bw)


def embed_variants(image: Tensor, spec: ShiftSpec, convs: Sequence[Conv2d],
                   translate=shift_image) -> VariantEmbedding:
    """Embed every shift variant of ``image`` with its own convolution.

    ``convs`` holds one conv per variant, or a single conv shared by all.
    """
    squeeze = image.ndim == 3
    x = image.reshape((1,) + image.shape) if squeeze else image
    if len(convs) not in (1, len(spec)):
        raise ConfigError(f"{len(convs)} convolutions for {len(spec)} shift variants")
    conv0 = convs[0]
    k, s, p = conv0.weight.shape[-1], conv0.stride, conv0.padding
    H, W = x.shape[-2:]
    if s > 1 and (H % s or W % s):
        raise ConfigError(f"image {H}x{W} is not divisible by patch size {s}")
    variants = []
    grid = None
    for i, shift in enumerate(spec):
        conv = convs[i] if len(convs) > 1 else conv0
        fmap = conv(translate(x, shift))
        grid = fmap.shape[-2:]
        variants.append(feature_map_to_tokens(fmap))
    tokens = T.stack(variants, axis=1)                   # N T B D
    if squeeze:
        tokens = tokens.reshape(tokens.shape[1:])
    return VariantEmbedding(tokens, tuple(grid))


def add_positional(v: VariantEmbedding, pos: PositionalTable) -> VariantEmbedding:
    table = pos.table
    t_rows = table.shape[0]
    expected = v.num_variants if pos.per_variant else 1
    if t_rows != expected or table.shape[1:] != v.tokens.shape[-2:]:
        raise ConfigError(
            f"positional table {table.shape} ({'per-variant' if pos.per_variant else 'shared'}) "
            f"does not match tokens {v.tokens.shape}")
    return VariantEmbedding(v.tokens + table, v.grid)


class ShiftEmbedding(Module):
    """Image -> per-variant token sets with positional offsets added.

    ``conv_variations=False`` switches to the ablation where shifted images are
    produced by mirror-padded translation and share a single convolution.
    """

    def __init__(self, spec: ShiftSpec, in_channels: int, dim: int, kernel: int, stride: int,
                 padding: int, grid: tuple[int, int], rng: np.random.Generator,
                 per_variant_pos: bool = True, conv_variations: bool = True, dtype=np.float32):
        self.spec = spec
        if spec.max_offset() > stride:
            warnings.warn(f"shift offsets up to {spec.max_offset()} exceed the patch size {stride}",
                          stacklevel=2)
        n_convs = len(spec) if conv_variations else 1
        self.convs = [Conv2d(in_channels, dim, kernel, rng, stride=stride, padding=padding,
                             dtype=dtype) for _ in range(n_convs)]
        self.conv_variations = conv_variations
        self.pos = PositionalTable.create(len(spec), grid[0] * grid[1], dim, rng,
                                          per_variant=per_variant_pos, dtype=dtype)
        self.pos_table = self.pos.table

    def forward(self, images: Tensor) -> VariantEmbedding:
        translate = shift_image if self.conv_variations else translate_reflect
        v = embed_variants(images, self.spec, self.convs, translate=translate)
        return add_positional(v, self.pos)
