"""MNIST IDX loading, a synthetic stand-in dataset and deterministic batching."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import SplitMix64, derive_seed

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        """The first ``n`` examples (all of them when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n])

    def with_classes(self, classes: Sequence[int]) -> "Dataset":
        mask = np.isin(self.labels, list(classes))
        return Dataset(self.images[mask], self.labels[mask])


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _parse_header(buf: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    size = 4 * (1 + ndims)
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: header needs {size} bytes, file has {len(buf)}")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic {found}, expected {magic}")
    if len(buf) < size:
        raise TruncatedFileError(f"{path}: header needs {size} bytes, file has {len(buf)}")
    return struct.unpack(f">{ndims}I", buf[4:size])


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 images (N, rows, cols) from an IDX3 file (optionally gzipped)."""
    buf = _read_bytes(path)
    n, rows, cols = _parse_header(buf, IMAGE_MAGIC, 3, path)
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    (n,) = _parse_header(buf, LABEL_MAGIC, 1, path)
    if len(buf) < 8 + n:
        raise TruncatedFileError(f"{path}: expected {8 + n} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64))


def load_mnist(data_dir, split: str = "train") -> Dataset:
    """Load a split from a directory holding the standard files, raw or ``.gz``."""
    names = TRAIN_FILES if split == "train" else TEST_FILES
    paths = []
    for name in names:
        p = Path(data_dir) / name
        if not p.exists() and p.with_name(name + ".gz").exists():
            p = p.with_name(name + ".gz")
        paths.append(p)
    return load_idx(*paths)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", LABEL_MAGIC, len(labels)) + labels.tobytes())


def synthetic_dataset(seed: int, n: int, classes: int = 10, size: int = 28) -> Dataset:
    """Images of a noisy oriented intensity ramp inside a jittered disc.

    Class ``c`` ramps along angle ``2 pi c / classes``. Labels cycle through
    the classes so every class appears ``n // classes`` times or one more.
    """
    if n < 1 or classes < 1:
        raise ValueError(f"n and classes must be >= 1, got n={n}, classes={classes}")
    rng = SplitMix64(derive_seed(seed, 0x5EED))
    labels = np.arange(n, dtype=np.int64) % classes
    theta = 2.0 * np.pi * labels / classes
    centre = size / 2.0 - 0.5 + (rng.uniform_array(2 * n).reshape(n, 2) - 0.5) * 6.0
    radius = size * 0.3
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy[None] - centre[:, 0, None, None]
    dx = xx[None] - centre[:, 1, None, None]
    proj = (dx * np.cos(theta)[:, None, None] + dy * np.sin(theta)[:, None, None]) / radius
    inside = (dx ** 2 + dy ** 2) <= radius ** 2
    img = np.where(inside, 0.5 + 0.5 * proj, 0.0)
    img += 0.1 * rng.normal_array(n * size * size).reshape(n, size, size)
    img = np.clip(img, 0.0, 1.0)
    return Dataset(img[:, None], labels)


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int

    def permutation(self, n: int, epoch: int) -> np.ndarray:
        return SplitMix64(derive_seed(self.seed, 0xBA7C, epoch)).permutation(n)


def batches(dataset: Dataset, plan: BatchPlan, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    n = len(dataset)
    if not 1 <= plan.batch_size <= n:
        raise ValueError(f"batch size {plan.batch_size} must lie in [1, {n}]")
    order = plan.permutation(n, epoch)
    for start in range(0, n, plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield dataset.images[idx], dataset.labels[idx]
