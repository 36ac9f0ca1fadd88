"""Datasets: CIFAR-10 binary batches, a synthetic stand-in, and augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None  # per-channel, from the training split
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if self.mean is None:
            self.mean, self.std = channel_stats(self.images)

    def __len__(self):
        return len(self.labels)

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return ((images - self.mean.reshape(1, -1, 1, 1)) / self.std.reshape(1, -1, 1, 1)
                ).astype(np.float32)

    def denormalize(self, images: np.ndarray) -> np.ndarray:
        return (images * self.std.reshape(1, -1, 1, 1) + self.mean.reshape(1, -1, 1, 1)
                ).astype(np.float32)

    def with_stats(self, mean, std) -> "Dataset":
        return replace(self, mean=np.asarray(mean, np.float32), std=np.asarray(std, np.float32))

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def channel_stats(images: np.ndarray):
    if len(images) == 0:
        return np.zeros(images.shape[1], np.float32), np.ones(images.shape[1], np.float32)
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(np.float32), np.maximum(std, 1e-8).astype(np.float32)


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------

def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch: records of 1 label byte + 3072 pixel bytes."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    whole = len(raw) // RECORD_BYTES
    if len(raw) % RECORD_BYTES:
        raise ValueError(f"{path}: truncated record at byte offset {whole * RECORD_BYTES} "
                         f"(file has {len(raw)} bytes, records are {RECORD_BYTES})")
    rec = raw.reshape(whole, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{path}: label {labels[bad]} at byte offset {bad * RECORD_BYTES}")
    images = rec[:, 1:].reshape(whole, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Inverse of the [0, 1] scaling applied on load."""
    return np.rint(images * 255.0).astype(np.uint8)


def load_cifar10(directory):
    directory = Path(directory)
    parts = [read_cifar_batch(directory / name) for name in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = read_cifar_batch(directory / CIFAR_TEST_FILE)
    train = Dataset(train_x, train_y, 10, "train")
    test = Dataset(test_x, test_y, 10, "val", train.mean, train.std)
    return train, test


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _class_grid(classes: int):
    """(orientation, frequency) pairs, one per class."""
    n_freq = 2 if classes >= 4 else 1
    n_orient = -(-classes // n_freq)
    orients = np.linspace(0, np.pi / 2, n_orient) if n_orient > 1 else np.array([np.pi / 4])
    freqs = np.array([0.09, 0.2])[:n_freq] if n_freq > 1 else np.array([0.14])
    grid = [(o, f) for f in freqs for o in orients]
    return grid[:classes]


def make_synthetic(classes: int = 10, per_class: int = 500, seed: int = 0, size: int = 32,
                   noise: float = 0.35, split: str = "train") -> Dataset:
    """Textured images whose class is the (orientation, spatial frequency) of a plaid.

    Each image is the sum of two sinusoidal gratings at angles +theta and
    -theta (so the class survives horizontal flips) with independent random
    phases, a random colour tint and Gaussian pixel noise.  Random phases
    make the class-conditional mean image nearly flat, so a linear model on
    raw pixels does poorly while a small CNN detects the texture easily.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    grid = _class_grid(classes)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.array([grid[c][0] for c in labels]) + rng.normal(0, 0.04, n)
    freq = np.array([grid[c][1] for c in labels]) * rng.uniform(0.9, 1.1, n)
    phase = rng.uniform(0, 2 * np.pi, (n, 2))
    signal = np.zeros((n, size, size))
    for sign, k in ((1, 0), (-1, 1)):
        proj = xx[None] * np.cos(sign * theta)[:, None, None] + yy[None] * np.sin(sign * theta)[:, None, None]
        signal += np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, k, None, None])
    tint = rng.uniform(0.3, 1.0, (n, 3))
    images = 0.5 + 0.2 * tint[:, :, None, None] * signal[:, None]
    images += rng.normal(0, noise * 0.2, images.shape)
    images = np.clip(images, 0, 1).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), classes, split)


def make_synthetic_split(classes=10, train_per_class=500, val_per_class=100, seed=0):
    """Train and validation sets from disjoint random streams; val uses train stats."""
    train = make_synthetic(classes, train_per_class, seed=seed, split="train")
    val = make_synthetic(classes, val_per_class, seed=seed + 7919, split="val")
    return train, val.with_stats(train.mean, train.std)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4,
            flips=None, offsets=None) -> np.ndarray:
    """Random horizontal flip (p = 0.5) and pad-then-crop, per image.

    ``flips`` (bool per image) and ``offsets`` (``(dy, dx)`` per image, in
    ``[0, 2*pad]``) override the random draws; ``offsets`` of ``(pad, pad)``
    return the unshifted image.
    """
    n, c, h, w = batch.shape
    if flips is None:
        flips = rng.random(n) < 0.5
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = batch
    out = np.empty_like(batch)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
