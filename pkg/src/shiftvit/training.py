"""AdamW with warmup + cosine schedule, gradient clipping, and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from .data import DatasetHandle, augment, iterate_batches
from .nn import LayerNorm, Module
from .tensor import Tensor, cross_entropy, no_grad

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "train_loss", "test_acc", "wall_seconds")


@dataclass
class TrainConfig:
    base_lr: float = 5e-4          # per 512 images
    batch_size: int = 128
    epochs: int = 20
    warmup_epochs: float = 5
    weight_decay: float = 0.05
    clip_norm: float = 5.0
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    micro_batch: Optional[int] = 32  # images per forward; gradients are accumulated
    augment: bool = True
    eval_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("base_lr", "batch_size", "epochs", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_epochs < 0 or self.weight_decay < 0:
            raise ValueError("warmup_epochs and weight_decay must be non-negative")

    @property
    def peak_lr(self) -> float:
        return self.base_lr / 512 * self.batch_size

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak rate, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(cfg.warmup_epochs * total_steps / cfg.epochs))
    peak = cfg.peak_lr
    if step < warmup:
        return peak * step / warmup
    span = total_steps - warmup
    if span <= 0:
        return peak
    progress = (step - warmup) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def no_decay_names(model: Module) -> set[str]:
    """LayerNorm gains/biases and positional tables are exempt from weight decay."""
    names = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, LayerNorm):
            prefix = f"{mod_name}." if mod_name else ""
            names.update(prefix + n for n, _ in mod.named_parameters())
    names.update(n for n, _ in model.named_parameters() if n.endswith("pos_table"))
    return names


class AdamW:
    def __init__(self, model: Module, lr: float = 0.0, weight_decay: float = 0.05,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(model.named_parameters())
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.decay = {k: k not in no_decay_names(model) for k in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        lr = self.lr
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.decay[k] and self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_arrays(self, state: dict) -> None:
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(state[f"v.{k}"], dtype=self.params[k].dtype)


def global_grad_norm(model: Module) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(model: Module, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(model)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in model.parameters():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


def loss_and_grads(model: Module, images: np.ndarray, labels: np.ndarray,
                   micro_batch: Optional[int] = None) -> float:
    """Mean cross-entropy over the batch; gradients accumulate chunk by chunk."""
    model.zero_grad()
    n = len(labels)
    chunk = micro_batch or n
    total = 0.0
    for s in range(0, n, chunk):
        x, y = images[s:s + chunk], labels[s:s + chunk]
        loss = cross_entropy(model(Tensor(x)), y) * (len(y) / n)
        loss.backward()
        total += float(loss.data)
    return total


def train_step(model: Module, images: np.ndarray, labels: np.ndarray, opt: AdamW,
               cfg: TrainConfig) -> tuple[float, float]:
    """One optimizer update at ``opt.lr``; returns (loss, pre-clip gradient norm)."""
    images = np.asarray(images, dtype=getattr(model, "dtype", np.float32))
    loss = loss_and_grads(model, images, labels, cfg.micro_batch)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} at optimizer step {opt.t + 1} (lr={opt.lr:g})")
    norm = clip_gradients(model, cfg.clip_norm)
    opt.step()
    return loss, norm


def predict(model: Module, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            x = np.asarray(images[s:s + batch_size], dtype=getattr(model, "dtype", np.float32))
            preds.append(model(Tensor(x)).data.argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def evaluate(model: Module, data: DatasetHandle, batch_size: int = 256) -> float:
    """Top-1 accuracy."""
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(model, data.images, batch_size) == data.labels))


def fit(model: Module, train: DatasetHandle, test: Optional[DatasetHandle], cfg: TrainConfig,
        out_dir=None, opt: Optional[AdamW] = None) -> list[dict]:
    """Train for ``cfg.epochs`` epochs; writes metrics.csv and checkpoint.bin under ``out_dir``."""
    rng = np.random.default_rng(cfg.seed)
    opt = opt or AdamW(model, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_FIELDS)
    history = []
    start = time.perf_counter()
    step = opt.t
    for epoch in range(1, cfg.epochs + 1):
        losses, lr = [], 0.0
        for idx in iterate_batches(len(train), cfg.batch_size, rng):
            x = train.images[idx]
            if cfg.augment:
                x = augment(x, rng)
            lr = schedule(min(step, total), total, cfg)
            opt.lr = lr
            loss, _ = train_step(model, x, train.labels[idx], opt, cfg)
            losses.append(loss)
            step += 1
        test_acc = float("nan")
        if test is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            test_acc = evaluate(model, test)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
               "test_acc": test_acc, "wall_seconds": time.perf_counter() - start}
        history.append(row)
        log.info("epoch %d  lr %.3g  loss %.4f  test_acc %.4f", epoch, lr, row["train_loss"], test_acc)
        if out is not None:
            with open(out / "metrics.csv", "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [epoch, repr(lr), repr(row["train_loss"]), repr(test_acc),
                     f"{row['wall_seconds']:.3f}"])
            ck = checkpoint.from_training(model, opt, step, meta={
                "train_config": cfg.to_dict(), "epoch": epoch, "test_acc": test_acc})
            checkpoint.save(out / "checkpoint.bin", ck)
    return history
