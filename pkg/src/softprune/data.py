"""CIFAR-10 binary batches and a deterministic synthetic stand-in."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])
RECORD_BYTES = 1 + 3 * 32 * 32

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def parse_cifar_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Split raw CIFAR-10 records into uint8 images [N,3,32,32] and labels."""
    if len(raw) % RECORD_BYTES:
        raise FormatError(f"{source}: size {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{source}: record {int(bad[0])} has label byte {int(labels[bad[0]])} > 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def standardize(images_u8: np.ndarray, dtype=np.float32) -> np.ndarray:
    x = images_u8.astype(np.float64) / 255.0
    x = (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]
    return x.astype(dtype)


def load_cifar10(directory: str, split: str = "train", dtype=np.float32) -> Dataset:
    """Load the canonical binary batches from ``directory``."""
    names = {"train": TRAIN_FILES, "test": TEST_FILES}.get(split)
    if names is None:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    images, labels = [], []
    for name in names:
        path = os.path.join(directory, name)
        with open(path, "rb") as fh:
            img, lab = parse_cifar_records(fh.read(), path)
        images.append(img)
        labels.append(lab)
    return Dataset(standardize(np.concatenate(images), dtype), np.concatenate(labels))


def gen_synthetic(
    classes: int = 10,
    n_per_class: int = 200,
    image_size: int = 16,
    seed: int = 0,
    split: str = "train",
    noise: float = 3.0,
    dtype=np.float32,
) -> Dataset:
    """Noisy, randomly shifted copies of one smooth template per class.

    Templates depend only on ``seed``; ``split`` picks an independent noise
    stream so train and test share classes but not samples.
    """
    if classes < 2:
        raise ConfigError("synthetic data needs at least 2 classes")
    if image_size < 4:
        raise ConfigError("synthetic images must be at least 4x4")
    trng = np.random.default_rng(seed)
    coarse = trng.standard_normal((classes, 3, 4, 4))
    rep = -(-image_size // 4)
    templates = np.kron(coarse, np.ones((1, 1, rep, rep)))[:, :, :image_size, :image_size]
    templates += 0.5 * trng.standard_normal((classes, 3, image_size, image_size))

    split_id = {"train": 1, "test": 2}.get(split)
    if split_id is None:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    rng = np.random.default_rng([seed, split_id])
    labels = np.repeat(np.arange(classes), n_per_class)
    labels = labels[rng.permutation(labels.size)]
    x = templates[labels]
    shifts = rng.integers(-2, 3, size=(labels.size, 2))
    for i, (dy, dx) in enumerate(shifts):
        x[i] = np.roll(x[i], (int(dy), int(dx)), axis=(1, 2))
    x = x * rng.uniform(0.6, 1.4, size=(labels.size, 1, 1, 1))
    x = x + noise * rng.standard_normal(x.shape)
    return Dataset(x.astype(dtype), labels.astype(np.int64))


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flip plus random crop from a zero-padded copy."""
    out = np.empty_like(x)
    n, _, h, w = x.shape
    flips = rng.random(n) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for i in range(n):
        img = padded[i, :, offs[i, 0]:offs[i, 0] + h, offs[i, 1]:offs[i, 1] + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out
