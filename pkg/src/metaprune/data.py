"""Datasets: CIFAR-10 binary ingestion, synthetic blobs, hold-out splits, batching."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
AUGMENTATIONS = ("none", "flip", "pad4crop", "flip+pad4crop")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"{self.images.shape[0]} images but labels of shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def load_cifar_binary(paths, normalize: tuple | None = None) -> Dataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-planar pixel bytes).

    Pixels are scaled to [0, 1]; ``normalize=(mean, std)`` then applies
    per-channel standardization.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}-byte records")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = records[:, 0].astype(np.int64)
        if lab.size and lab.max() >= 10:
            bad = int(np.argmax(lab >= 10))
            raise DataFormatError(f"{path}: record {bad} has label {lab[bad]} >= 10")
        labels.append(lab)
        images.append(records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0)
    x = np.concatenate(images) if images else np.zeros((0, *CIFAR_SHAPE))
    y = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    if normalize is not None:
        mean, std = (np.asarray(v, dtype=np.float64).reshape(1, -1, 1, 1) for v in normalize)
        x = (x - mean) / std
    logger.info("loaded %d CIFAR-10 records from %d file(s)", len(y), len(paths))
    return Dataset(x, y, 10)


def synth_blobs(
    classes: int,
    per_class: int,
    image_shape=(3, 16, 16),
    seed: int = 0,
    noise: float = 0.25,
    cell: int = 4,
) -> Dataset:
    """Class prototypes plus i.i.d. Gaussian pixel noise, clipped to [0, 1].

    Each prototype is a ``cell x cell``-pixel blocky random pattern around 0.5,
    so classes differ in spatial structure rather than mean colour alone.
    """
    c, h, w = image_shape
    rng = np.random.default_rng(seed)
    coarse = rng.normal(0.5, 0.25, size=(classes, c, -(-h // cell), -(-w // cell)))
    protos = np.clip(np.kron(coarse, np.ones((1, 1, cell, cell)))[:, :, :h, :w], 0.0, 1.0)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    images = protos[labels] + noise * rng.standard_normal((labels.size, c, h, w))
    order = rng.permutation(labels.size)
    return Dataset(np.clip(images[order], 0.0, 1.0), labels[order], classes)


def split_holdout(dataset: Dataset, per_class: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Move ``per_class`` randomly chosen images of every class into a held-out split."""
    rng = np.random.default_rng(seed)
    held = []
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size < per_class:
            raise ValueError(f"class {k} has {idx.size} images, cannot hold out {per_class}")
        held.append(rng.permutation(idx)[:per_class])
    held_idx = np.sort(np.concatenate(held)) if held else np.zeros(0, dtype=np.int64)
    mask = np.ones(len(dataset), dtype=bool)
    mask[held_idx] = False
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(held_idx)


def flip(images: np.ndarray) -> np.ndarray:
    """Horizontal mirror of (..., H, W) images."""
    return images[..., ::-1]


def pad_crop(image: np.ndarray, pad: int, dy: int, dx: int) -> np.ndarray:
    """Zero-pad (C, H, W) by ``pad`` and crop back to (H, W) at offset (dy, dx)."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, dy:dy + h, dx:dx + w]


def augment_batch(x: np.ndarray, mode: str, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    if mode not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {mode!r}; choose from {AUGMENTATIONS}")
    if mode == "none":
        return x
    x = x.copy()
    if "flip" in mode:
        mask = rng.random(x.shape[0]) < 0.5
        x[mask] = flip(x[mask])
    if "pad4crop" in mode:
        offsets = rng.integers(0, 2 * pad + 1, size=(x.shape[0], 2))
        for i, (dy, dx) in enumerate(offsets):
            x[i] = pad_crop(x[i], pad, dy, dx)
    return x


def batches(dataset: Dataset, batch_size: int, augment: str = "none", seed: int = 0, epoch: int = 0, shuffle: bool = True):
    """Yield ``(images, labels)`` for one epoch; the last batch may be short.

    Shuffling and augmentation draw from a generator seeded by ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield augment_batch(dataset.images[idx], augment, rng), dataset.labels[idx]
