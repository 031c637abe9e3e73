"""Dataset ingestion: IDX (MNIST family), CIFAR-10 binary, and synthetic shapes."""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass
class LabeledImageSet:
    images: np.ndarray  # uint8 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index, split: Optional[str] = None) -> "LabeledImageSet":
        return LabeledImageSet(self.images[index], self.labels[index], self.num_classes, split or self.split)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise DatasetError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DatasetError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, split: str = "train", num_classes: int = 10) -> LabeledImageSet:
    """Read an IDX image/label pair (gzip-compressed files are accepted)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise DatasetError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    if labels.size and labels.max() >= num_classes:
        raise DatasetError(f"label {labels.max()} out of range for {num_classes} classes")
    return LabeledImageSet(images[:, None].copy(), labels.astype(np.int64), num_classes, split)


def load_cifar10_binary(paths: Sequence[PathLike], split: str = "train") -> LabeledImageSet:
    """Concatenate CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes per record)."""
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise DatasetError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        if not raw:
            logger.warning("%s is empty", path)
            continue
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = records[:, 0].astype(np.int64)
        if lab.max() >= 10:
            raise DatasetError(f"{path}: label {lab.max()} out of range [0, 10)")
        labels.append(lab)
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        return LabeledImageSet(np.zeros((0, 3, 32, 32), np.uint8), np.zeros(0, np.int64), 10, split)
    return LabeledImageSet(np.concatenate(images), np.concatenate(labels), 10, split)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        for candidate in (data_dir / name, data_dir / "MNIST" / "raw" / name):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"{stem} not found under {data_dir}")


def load_mnist_dir(data_dir: PathLike) -> tuple[LabeledImageSet, LabeledImageSet]:
    data_dir = Path(data_dir)
    out = []
    for split, (img, lab) in MNIST_FILES.items():
        out.append(load_idx(_find(data_dir, img), _find(data_dir, lab), split))
    return out[0], out[1]


def load_cifar10_dir(data_dir: PathLike) -> tuple[LabeledImageSet, LabeledImageSet]:
    data_dir = Path(data_dir)
    root = data_dir / "cifar-10-batches-bin" if (data_dir / "cifar-10-batches-bin").is_dir() else data_dir
    train_files = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
    test_files = [root / "test_batch.bin"]
    missing = [str(p) for p in train_files + test_files if not p.exists()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 binary files missing: {', '.join(missing)}")
    return load_cifar10_binary(train_files, "train"), load_cifar10_binary(test_files, "test")


# -- synthetic --------------------------------------------------------------
def _pattern(kind: int, size: int) -> np.ndarray:
    """A [size, size] template in [0, 1] for class ``kind``."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    if kind == 0:
        return (np.floor(yy * 3.99) % 2).astype(float)  # horizontal bars
    if kind == 1:
        return (np.floor(xx * 3.99) % 2).astype(float)  # vertical bars
    if kind == 2:
        r = np.hypot(yy - 0.5, xx - 0.5)
        return ((r > 0.2) & (r < 0.38)).astype(float)  # ring
    if kind == 3:
        return ((np.abs(yy - 0.5) < 0.3) & (np.abs(xx - 0.5) < 0.3)).astype(float)  # filled square
    if kind == 4:
        return ((np.abs(yy - 0.5) < 0.1) | (np.abs(xx - 0.5) < 0.1)).astype(float)  # cross
    if kind == 5:
        return ((np.floor(yy * 3.99) + np.floor(xx * 3.99)) % 2).astype(float)  # checkerboard
    if kind == 6:
        return (np.abs(yy - xx) < 0.15).astype(float)  # diagonal
    if kind == 7:
        return (np.hypot(yy - 0.5, xx - 0.5) < 0.2).astype(float)  # dot
    if kind == 8:
        return (np.abs(yy + xx - 1.0) < 0.15).astype(float)  # anti-diagonal
    corners = np.minimum(np.hypot(yy - 0.2, xx - 0.2), np.hypot(yy - 0.8, xx - 0.8))
    return (corners < 0.15).astype(float)  # two corner dots


MAX_SYNTHETIC_CLASSES = 10


def synthetic_shapes(
    n: int,
    num_classes: int = 4,
    size: int = 32,
    seed: int = 0,
    channels: int = 3,
    noise: float = 0.1,
    split: str = "train",
) -> LabeledImageSet:
    """Class-dependent geometric patterns with random tint, jitter and pixel noise.

    Labels are assigned round-robin, so classes are balanced.
    """
    if n < num_classes:
        raise ValueError(f"need at least one sample per class: n={n}, classes={num_classes}")
    if not 1 <= num_classes <= MAX_SYNTHETIC_CLASSES:
        raise ValueError(f"synthetic_shapes supports 1..{MAX_SYNTHETIC_CLASSES} classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    templates = np.stack([_pattern(k, size) for k in range(num_classes)])
    tints = rng.uniform(0.5, 1.0, (n, channels))
    shifts = rng.integers(-1, 2, (n, 2))
    contrast = rng.uniform(0.7, 1.0, n)
    images = np.empty((n, channels, size, size), dtype=np.uint8)
    for i in range(n):
        k = labels[i]
        base = np.roll(templates[k], tuple(shifts[i]), axis=(0, 1))
        img = contrast[i] * tints[i][:, None, None] * base[None]
        img = img + rng.normal(0.0, noise, img.shape)
        images[i] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return LabeledImageSet(images, labels, num_classes, split)


def split_dataset(ds: LabeledImageSet, val_fraction: float = 0.2, seed: int = 0) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Seeded shuffle, then the first ``1 - val_fraction`` for training."""
    order = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(len(ds) * (1.0 - val_fraction)))
    return ds.subset(np.sort(order[:cut]), "train"), ds.subset(np.sort(order[cut:]), "val")


# -- preprocessing ----------------------------------------------------------
def channel_stats(ds: LabeledImageSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of pixel values scaled to [0, 1]."""
    x = ds.images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 1e-8, std, 1.0)


def normalize(batch: np.ndarray, mean, std) -> np.ndarray:
    x = batch.astype(np.float32) / 255.0 if batch.dtype == np.uint8 else batch.astype(np.float32)
    mean = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return (x - mean) / std


def denormalize(batch: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return batch * std + mean


def augment(batch: np.ndarray, crop_pad: int, hflip_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad then random crop back to size; random horizontal flip."""
    if crop_pad < 0:
        raise ValueError(f"crop_pad must be >= 0, got {crop_pad}")
    if not 0.0 <= hflip_prob <= 1.0:
        raise ValueError(f"hflip_prob must lie in [0, 1], got {hflip_prob}")
    n, _, h, w = batch.shape
    out = batch
    if crop_pad:
        padded = np.pad(batch, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)), mode="reflect")
        offsets = rng.integers(0, 2 * crop_pad + 1, (n, 2))
        out = np.stack([padded[i, :, dy : dy + h, dx : dx + w] for i, (dy, dx) in enumerate(offsets)])
    if hflip_prob > 0:
        flips = rng.random(n) < hflip_prob
        if flips.any():
            out = out.copy() if out is batch else out
            out[flips] = out[flips, :, :, ::-1]
    return out


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[:, :, :, ::-1].copy()
