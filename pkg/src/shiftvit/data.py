"""CIFAR-10 binary-format reader and the flip/crop augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

RECORD_BYTES = 3073
IMAGE_BYTES = 3072
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


class DataFormatError(ValueError):
    pass


@dataclass
class DatasetHandle:
    images: np.ndarray            # N x 3 x H x W, float32, normalized
    labels: np.ndarray            # N, int64
    split: str
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, np.float32))
    classes: int = 10

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "DatasetHandle":
        return DatasetHandle(self.images[:n], self.labels[:n], self.split, self.mean, self.std,
                             self.classes)


def read_cifar_file(path: Union[str, Path], classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (N, 3, 32, 32) and labels from one binary batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        n_full = raw.size // RECORD_BYTES
        raise DataFormatError(f"{path}: truncated record at byte offset {n_full * RECORD_BYTES} "
                              f"({raw.size} bytes is not a multiple of {RECORD_BYTES})")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"{path}: label {labels[i]} >= {classes} at byte offset {i * RECORD_BYTES}")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def _read_split(root: Path, files: Sequence[str], classes: int):
    missing = [f for f in files if not (root / f).exists()]
    if missing:
        raise FileNotFoundError(f"{root}: missing {', '.join(missing)}")
    parts = [read_cifar_file(root / f, classes) for f in files]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def channel_stats(images_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images_u8.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-8).astype(np.float32)


def normalize(images_u8: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float32) / 255.0
    return (x - mean[None, :, None, None]) / std[None, :, None, None]


def load_cifar(root: Union[str, Path], split: str = "train", classes: int = 10,
               stats: Optional[tuple[np.ndarray, np.ndarray]] = None) -> DatasetHandle:
    """Load a CIFAR-10 split, normalized with per-channel train-split statistics.

    ``stats`` skips re-reading the train files when the statistics are known.
    """
    root = Path(root)
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    images, labels = _read_split(root, TRAIN_FILES if split == "train" else TEST_FILES, classes)
    if stats is None:
        stats = channel_stats(images if split == "train" else _read_split(root, TRAIN_FILES, classes)[0])
    mean, std = stats
    return DatasetHandle(normalize(images, mean, std), labels, split, mean, std, classes)


def write_cifar_file(path: Union[str, Path], images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`read_cifar_file`; used for fixtures and subsets."""
    n = len(labels)
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images_u8.reshape(n, IMAGE_BYTES)
    rec.tofile(path)


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus zero-pad-and-crop (zero is the normalized mean)."""
    n, c, h, w = images.shape
    out = images.copy()
    flip = rng.random(n) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
