"""Dataset plumbing: synthetic generators and the IDX image/label reader."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    train_inputs: np.ndarray
    train_labels: np.ndarray
    test_inputs: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    num_classes: int = 0

    def __post_init__(self) -> None:
        if self.num_classes == 0:
            self.num_classes = int(self.train_labels.max()) + 1

    @property
    def n_train(self) -> int:
        return self.train_inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.train_inputs.shape[1]

    @property
    def has_test(self) -> bool:
        return self.test_inputs is not None and self.test_inputs.shape[0] > 0


def _stratified_split(x: np.ndarray, y: np.ndarray, test_fraction: float) -> Dataset:
    """Deterministic per-class 80/20 style split: the tail of each class goes to test."""
    train_idx, test_idx = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        n_test = int(round(test_fraction * idx.size))
        cut = idx.size - n_test
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    tr = np.concatenate(train_idx)
    te = np.concatenate(test_idx)
    tr.sort()
    te.sort()
    return Dataset(x[tr], y[tr], x[te], y[te], num_classes=int(y.max()) + 1)


def make_blobs(classes: int, dim: int, n: int, noise: float, seed: int) -> Dataset:
    """Gaussian clusters with unit-spaced means on the first axis, 80/20 split.

    Class counts are balanced within one sample; with noise 0 a nearest-mean
    classifier is exact.  Fully deterministic in the seed.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if dim < 1 or n < classes:
        raise ValueError("need dim >= 1 and n >= classes")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB10B]))
    counts = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
    xs, ys = [], []
    for c, cnt in enumerate(counts):
        center = np.zeros(dim)
        center[0] = float(c)
        xs.append(center + noise * rng.standard_normal((cnt, dim)))
        ys.append(np.full(cnt, c, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(n)
    return _stratified_split(x[perm], y[perm], test_fraction=0.2)


def make_spirals(classes: int, n: int, noise: float, seed: int) -> Dataset:
    """Interleaved 2-d spiral arms, one arm per class, 80/20 split."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x59124A]))
    counts = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
    xs, ys = [], []
    for c, cnt in enumerate(counts):
        t = np.linspace(0.25, 1.0, cnt)
        angle = 2.0 * np.pi * (t * 1.5 + c / classes)
        pts = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
        xs.append(pts + noise * rng.standard_normal((cnt, 2)))
        ys.append(np.full(cnt, c, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(n)
    return _stratified_split(x[perm], y[perm], test_fraction=0.2)


def _open_maybe_gzip(path: str | Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_images(path: str | Path) -> np.ndarray:
    """Big-endian IDX image file -> float64 array [n, rows*cols] scaled to [0, 1]."""
    with _open_maybe_gzip(path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{path}: bad image magic 0x{magic:08x}")
        raw = fh.read(n * rows * cols)
    if len(raw) != n * rows * cols:
        raise ValueError(f"{path}: truncated image payload")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(n, rows * cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    """Big-endian IDX label file -> int64 class ids."""
    with _open_maybe_gzip(path) as fh:
        magic, n = struct.unpack(">II", fh.read(8))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{path}: bad label magic 0x{magic:08x}")
        raw = fh.read(n)
    if len(raw) != n:
        raise ValueError(f"{path}: truncated label payload")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx(
    train_images: str | Path,
    train_labels: str | Path,
    test_images: str | Path | None = None,
    test_labels: str | Path | None = None,
) -> Dataset:
    x = read_idx_images(train_images)
    y = read_idx_labels(train_labels)
    if x.shape[0] != y.shape[0]:
        raise ValueError("image/label counts differ")
    tx = ty = None
    if test_images is not None:
        tx = read_idx_images(test_images)
        ty = read_idx_labels(test_labels)
        if tx.shape[0] != ty.shape[0]:
            raise ValueError("test image/label counts differ")
    return Dataset(x, y, tx, ty)
