"""Dataset loaders (IDX, CIFAR-10 binary) and synthetic generators.

Every loader returns inputs scaled into [0, 1] so attack radii are on the
same scale across datasets.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """Malformed dataset file."""


class BadMagicError(DataFormatError):
    pass


class TruncatedDataError(DataFormatError):
    pass


class ConsistencyError(DataFormatError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ConsistencyError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise DataFormatError("inputs must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataFormatError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.inputs[:n], self.labels[:n], self.n_classes, self.split)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.inputs.astype(dtype), self.labels, self.n_classes, self.split)


def _read_idx(buf: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise TruncatedDataError(f"{what}: file shorter than the 4-byte magic")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{what}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(buf) < hdr:
        raise TruncatedDataError(f"{what}: header truncated at offset {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:hdr])
    count = math.prod(dims)
    if len(buf) - hdr < count:
        raise TruncatedDataError(f"{what}: payload has {len(buf) - hdr} bytes, header promises {count}")
    if len(buf) - hdr > count:
        raise ConsistencyError(f"{what}: {len(buf) - hdr - count} trailing bytes after payload")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=hdr).reshape(dims)


def load_idx(path_images, path_labels, n_classes: int = 10, split: str = "train") -> Dataset:
    """Images become (N, 1, rows, cols) float32 in [0, 1]."""
    images = _read_idx(Path(path_images).read_bytes(), IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(Path(path_labels).read_bytes(), IDX_LABELS_MAGIC, "labels")
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= n_classes:
        raise DataFormatError(f"label {labels.max()} outside [0, {n_classes})")
    x = images.astype(np.float32)[:, None] / np.float32(255.0)
    return Dataset(x, labels.astype(np.int64), n_classes, split)


def load_cifar_bin(paths: Sequence | str | Path, split: str = "train") -> Dataset:
    """CIFAR-10 binary batches: 1 label byte + 3072 channel-major pixel bytes per record."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys = [], []
    for p in paths:
        buf = Path(p).read_bytes()
        if len(buf) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: length {len(buf)} is not a multiple of {CIFAR_RECORD}")
        if not buf:
            warnings.warn(f"{p}: empty file, no records", stacklevel=2)
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0]
        if labels.size and labels.max() > 9:
            bad = int(np.argmax(labels > 9))
            raise DataFormatError(f"{p}: record {bad} has label {labels[bad]} > 9")
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0))
        ys.append(labels.astype(np.int64))
    x = np.concatenate(xs) if xs else np.zeros((0, 3, 32, 32), np.float32)
    y = np.concatenate(ys) if ys else np.zeros(0, np.int64)
    return Dataset(x, y, 10, split)


def _split_code(split: str) -> int:
    # train and test draws must come from different streams
    return {"train": 0, "test": 1}.get(split, 2 + sum(split.encode()))


def _to_unit_box(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def synth_blobs(n: int, n_classes: int = 3, dim: int = 3, separation: float = 6.0, seed: int = 0,
                split: str = "train") -> Dataset:
    """Unit-variance Gaussian clusters centred at ``separation * e_c`` (vertices of a simplex).

    The fixed affine map [-4, separation + 4] -> [0, 1] puts everything in the
    unit box; values beyond four cluster standard deviations are clipped.
    """
    if n < n_classes:
        raise ValueError("need at least one point per class")
    if dim < n_classes:
        raise ValueError(f"dim ({dim}) must be >= n_classes ({n_classes}) to hold simplex vertices")
    rng = np.random.default_rng([seed, 1, n, n_classes, dim, _split_code(split)])
    labels = rng.permutation(np.arange(n) % n_classes)
    centers = separation * np.eye(n_classes, dim)
    x = centers[labels] + rng.standard_normal((n, dim))
    x = _to_unit_box(x, -4.0, separation + 4.0).astype(np.float32)
    return Dataset(x, labels.astype(np.int64), n_classes, split)


def synth_two_moons(n: int, noise: float = 0.1, seed: int = 0, split: str = "train") -> Dataset:
    """Two interleaved half circles, mapped from [-1.5, 2.5]^2 into the unit square."""
    if n < 2:
        raise ValueError("need at least one point per class")
    rng = np.random.default_rng([seed, 2, n, _split_code(split)])
    labels = rng.permutation(np.arange(n) % 2)
    t = rng.uniform(0.0, math.pi, n)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.where(labels[:, None] == 0, outer, inner) + noise * rng.standard_normal((n, 2))
    x = _to_unit_box(x, -1.5, 2.5).astype(np.float32)
    return Dataset(x, labels.astype(np.int64), 2, split)
