"""Architecture configs, presets, and the end-to-end classifier."""

from __future__ import annotations

import json
import math
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .global_pyramid import ClassifierHead, Downsample, GlobalBlock
from .local_attn import LocalBlock
from .nn import Module
from .shift_embed import ConfigError, ShiftEmbedding, ShiftSpec, default_shift_set
from .tensor import Tensor


@dataclass(frozen=True)
class StageSpec:
    width: int
    heads: int
    repeats: int
    downsample: bool = True

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError(f"stage repeats must be >= 1, got {self.repeats}")
        if self.width % self.heads:
            raise ConfigError(f"stage width {self.width} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    patch: int = 1                 # embedding stride S
    kernel: int = 3                # embedding kernel K
    padding: int = 1               # embedding padding P
    shifts: ShiftSpec = field(default_factory=lambda: default_shift_set("cifar"))
    embed_dim: int = 192
    local_heads: int = 3
    stages: tuple[StageSpec, ...] = ()
    classes: int = 10
    per_variant_pos: bool = True
    conv_variations: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.embed_dim % self.local_heads:
            raise ConfigError(f"embed width {self.embed_dim} not divisible by {self.local_heads} heads")
        if self.stages and self.stages[0].width != self.embed_dim:
            raise ConfigError(f"first stage width {self.stages[0].width} != embed width {self.embed_dim}")
        H, W = self.image_size
        if self.patch > 1 and (H % self.patch or W % self.patch):
            raise ConfigError(f"image {H}x{W} is not divisible by patch size {self.patch}")
        bh, bw = self.grid
        if bh < 1 or bw < 1:
            raise ConfigError(f"embedding leaves an empty {bh}x{bw} grid")
        if len(self.shifts) > math.sqrt(bh * bw):
            warnings.warn(f"{len(self.shifts)} shift variants exceed sqrt(B) = {math.sqrt(bh * bw):.1f}; "
                          "local attention is no longer cheaper than global attention", stacklevel=2)

    @property
    def grid(self) -> tuple[int, int]:
        H, W = self.image_size
        return ((H + 2 * self.padding - self.kernel) // self.patch + 1,
                (W + 2 * self.padding - self.kernel) // self.patch + 1)

    def stage_grids(self) -> list[tuple[int, int]]:
        """Grid each stage's global blocks run on, plus the grid fed to the head."""
        grids = [self.grid]
        for st in self.stages:
            bh, bw = grids[-1]
            if st.downsample:
                grids.append(((bh - 1) // 2 + 1, (bw - 1) // 2 + 1))
            else:
                grids.append((bh, bw))
        return grids

    def stage_token_counts(self) -> list[int]:
        counts = []
        for bh, bw in self.stage_grids():
            if not counts or counts[-1] != bh * bw:
                counts.append(bh * bw)
        return counts

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["shifts"] = self.shifts.to_list()
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "preset" in d:
            base = preset(d.pop("preset"))
            merged = base.to_dict()
            merged.update(d)
            d = merged
        shifts = d.get("shifts")
        if isinstance(shifts, str):
            d["shifts"] = default_shift_set(shifts)
        elif shifts is not None:
            d["shifts"] = ShiftSpec.from_list(shifts)
        if "stages" in d:
            d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _uniform_stages(width, heads, repeats):
    last = len(repeats) - 1
    return tuple(StageSpec(width, heads, r, downsample=i != last) for i, r in enumerate(repeats))


def _presets() -> dict[str, ModelConfig]:
    cifar = dict(image_size=(32, 32), patch=1, kernel=3, padding=1, shifts=default_shift_set("cifar"),
                 classes=10)
    imagenet = dict(image_size=(224, 224), padding=0, shifts=default_shift_set("imagenet"), classes=1000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return {
            "cifar-tiny": ModelConfig(**cifar, embed_dim=192, local_heads=3,
                                      stages=_uniform_stages(192, 3, (2, 4, 4, 4))),
            "cifar-small": ModelConfig(**cifar, embed_dim=384, local_heads=6,
                                       stages=_uniform_stages(384, 6, (2, 4, 4, 4))),
            "cifar-base": ModelConfig(**cifar, embed_dim=768, local_heads=12,
                                      stages=_uniform_stages(768, 12, (3, 3, 3, 3))),
            "imagenet-tiny": ModelConfig(**imagenet, patch=7, kernel=7, embed_dim=192, local_heads=4,
                                         stages=_uniform_stages(192, 4, (2, 4, 4, 4))),
            "imagenet-small": ModelConfig(**imagenet, patch=4, kernel=4, embed_dim=64, local_heads=2,
                                          stages=(StageSpec(64, 2, 2), StageSpec(192, 6, 2),
                                                  StageSpec(384, 12, 10, downsample=False))),
            # cifar-tiny scaled down for finite-difference checks: 8x8 input, D=16, T=3
            "toy": ModelConfig(image_size=(8, 8), patch=1, kernel=3, padding=1,
                               shifts=ShiftSpec(((0, 0), (1, 0), (0, 1))), classes=10,
                               embed_dim=16, local_heads=2,
                               stages=_uniform_stages(16, 2, (2, 4, 4, 4))),
            # smallest useful network, for fast tests
            "micro": ModelConfig(image_size=(8, 8), patch=1, kernel=3, padding=1,
                                 shifts=ShiftSpec(((0, 0), (1, 0), (0, 1))), classes=4,
                                 embed_dim=8, local_heads=2,
                                 stages=_uniform_stages(8, 2, (1, 1))),
        }


PRESETS = _presets()


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


class ShiftViT(Module):
    """Shift embedding -> local block -> [global blocks -> downsample]* -> head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        c = config
        self.config = c
        self.dtype = np.dtype(dtype)
        grid = c.grid
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            self.embed = ShiftEmbedding(c.shifts, c.in_channels, c.embed_dim, c.kernel, c.patch,
                                        c.padding, grid, rng, per_variant_pos=c.per_variant_pos,
                                        conv_variations=c.conv_variations, dtype=dtype)
        self.local = LocalBlock(c.embed_dim, c.local_heads, rng, c.mlp_ratio, dtype=dtype)
        self.stages = []
        for i, st in enumerate(c.stages):
            blocks = [GlobalBlock(st.width, st.heads, rng, c.mlp_ratio, dtype=dtype)
                      for _ in range(st.repeats)]
            stage = _Stage(blocks)
            if st.downsample:
                d_down = c.stages[i + 1].width if i + 1 < len(c.stages) else st.width
                stage.down = Downsample(st.width, d_down, rng, dtype=dtype)
            self.stages.append(stage)
        final = c.stages[-1].width if c.stages else c.embed_dim
        self.head = ClassifierHead(final, c.classes, rng, dtype=dtype)

    def forward(self, images, trace: Optional[list] = None) -> Tensor:
        """Logits (N, C) for images (N, C_in, H, W).

        ``trace``, when given, receives one ``(tokens, width)`` pair per stage
        boundary, starting with the local block's output.
        """
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        expected = (self.config.in_channels,) + self.config.image_size
        if x.ndim != 4 or x.shape[1:] != expected:
            raise T.ShapeError(f"expected images of shape (N, {', '.join(map(str, expected))}), got {x.shape}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        v = self.embed(x)
        tokens = self.local(v).tokens
        grid = v.grid
        if trace is not None:
            trace.append((tokens.shape[1], tokens.shape[2]))
        for stage in self.stages:
            for blk in stage.blocks:
                tokens = blk(tokens)
            if stage.down is not None:
                tokens, grid = stage.down(tokens, grid)
                if trace is not None:
                    trace.append((tokens.shape[1], tokens.shape[2]))
        return self.head(tokens)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks
        self.down: Optional[Downsample] = None


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ShiftViT:
    return ShiftViT(config, np.random.default_rng(seed), dtype=dtype)


def param_report(model: ShiftViT) -> "OrderedDict[str, int]":
    """Trainable scalar counts grouped by top-level component."""
    report: OrderedDict[str, int] = OrderedDict()
    report["embed.convs"] = sum(p.size for p in model.embed.parameters() if p is not model.embed.pos_table)
    report["embed.pos"] = model.embed.pos_table.size
    report["local"] = model.local.num_params()
    for i, stage in enumerate(model.stages):
        report[f"stage{i + 1}.global"] = sum(b.num_params() for b in stage.blocks)
        if stage.down is not None:
            report[f"stage{i + 1}.down"] = stage.down.num_params()
    report["head"] = model.head.num_params()
    return report


def count_params(model: ShiftViT) -> int:
    return model.num_params()


def format_param_report(model: ShiftViT) -> str:
    rep = param_report(model)
    width = max(len(k) for k in rep)
    lines = [f"{k:<{width}}  {v:>12,d}" for k, v in rep.items()]
    total = count_params(model)
    lines.append(f"{'total':<{width}}  {total:>12,d}  ({total / 1e6:.2f}M)")
    return "\n".join(lines)
