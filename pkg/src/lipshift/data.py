"""Datasets: CIFAR binary batches, a raw float tensor format, synthetic blobs.

Pixels are kept in raw ``[0, 1]`` space with no mean/std normalization so that
an l2 radius such as 36/255 keeps its meaning.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .exceptions import ContractError, FormatError

CIFAR_PIXELS = 3 * 32 * 32
RAW_MAGIC = b"LSDT"
RAW_VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


def load_cifar_binary(path, variant: str = "c10") -> Dataset:
    """Read a CIFAR-10 (``c10``) or CIFAR-100 (``c100``) binary batch file.

    CIFAR-100 records carry a coarse label byte before the fine label; the
    fine label is returned.
    """
    if variant not in ("c10", "c100"):
        raise ContractError(f"unknown CIFAR variant {variant!r}")
    raw = Path(path).read_bytes()
    label_bytes = 1 if variant == "c10" else 2
    record = label_bytes + CIFAR_PIXELS
    num_classes = 10 if variant == "c10" else 100
    if len(raw) % record:
        offset = len(raw) - len(raw) % record
        raise FormatError(f"truncated CIFAR file {path}: partial record at byte offset {offset}")
    n = len(raw) // record
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, record)
    labels = buf[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"bad label byte {labels[i]} at byte offset {i * record + label_bytes - 1}")
    images = buf[:, label_bytes:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, num_classes, f"cifar-{variant}")


def save_raw(path, ds: Dataset) -> None:
    """Write ``ds`` in the raw tensor format (header, float32 payload, u32 labels)."""
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<5I", RAW_VERSION, n, c, h, w))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def load_raw(path, num_classes: int | None = None) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != RAW_MAGIC:
        raise FormatError(f"bad magic in {path}")
    if len(raw) < 24:
        raise FormatError(f"truncated header in {path}")
    version, n, c, h, w = struct.unpack("<5I", raw[4:24])
    if version != RAW_VERSION:
        raise FormatError(f"unsupported raw tensor version {version}")
    npix = n * c * h * w
    expected = 24 + 4 * npix + 4 * n
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    images = np.frombuffer(raw, dtype="<f4", count=npix, offset=24).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=24 + 4 * npix).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 1
    return Dataset(images.copy(), labels, num_classes, Path(path).stem)


def random_crop_pad(img: np.ndarray, pad: int, seed=None) -> np.ndarray:
    """Zero-pad ``[C, H, W]`` by ``pad`` and crop back at a uniform random offset."""
    if pad < 0:
        raise ContractError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return np.array(img, copy=True)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    return crop_at(img, pad, int(dy), int(dx))


def crop_at(img: np.ndarray, pad: int, dy: int, dx: int) -> np.ndarray:
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, dy : dy + h, dx : dx + w].copy()


def synthetic_blobs(
    n_per_class: int,
    classes: int,
    shape=(3, 8, 8),
    separation: float = 2.0,
    seed: int = 0,
    noise: float = 0.05,
    center_seed: int | None = None,
) -> Dataset:
    """Class-conditional Gaussian images around mutually orthogonal centers.

    Class centers sit at ``0.5 + (separation / sqrt(2)) * d_c`` for orthonormal
    random directions ``d_c``, so any two centers are ``separation`` apart in
    l2.  Per-pixel noise has standard deviation ``noise``; images are clipped
    to ``[0, 1]``.  The centers come from ``center_seed`` (default ``seed``),
    so train and test splits can share centers but not samples.
    """
    if separation <= 0:
        raise ContractError(f"separation must be > 0, got {separation}")
    if classes < 2:
        raise ContractError("need at least two classes")
    dim = int(np.prod(shape))
    if classes > dim:
        raise ContractError(f"{classes} classes do not fit orthogonally in {dim} dimensions")
    crng = np.random.default_rng(seed if center_seed is None else center_seed)
    q, _ = np.linalg.qr(crng.standard_normal((dim, classes)))
    rng = np.random.default_rng([seed, 1])
    centers = 0.5 + (separation / np.sqrt(2.0)) * q.T
    labels = np.repeat(np.arange(classes), n_per_class)
    x = centers[labels] + noise * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    images = np.clip(x[order], 0.0, 1.0).reshape((len(labels),) + tuple(shape))
    return Dataset(images.astype(np.float32), labels[order], classes, "blobs")


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of the nearest class-mean rule fit on ``train``."""
    xtr = train.images.reshape(len(train), -1).astype(np.float64)
    xte = test.images.reshape(len(test), -1).astype(np.float64)
    means = np.stack([xtr[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    d = ((xte[:, None, :] - means[None]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == test.labels))


def batch_iter(
    ds: Dataset,
    batch_size: int,
    shuffle_seed: int | None = 0,
    mix_ratio: tuple[int, int] | None = None,
    pad: int = 4,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches covering every index once.

    With ``mix_ratio=(clean, augmented)`` each batch keeps its first
    ``round(b * clean / (clean + augmented))`` samples as is and replaces the
    rest with random crops; the crop offsets are seeded from ``shuffle_seed``.
    """
    n = len(ds)
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > n:
        raise ContractError(f"batch_size {batch_size} exceeds dataset size {n}")
    if shuffle_seed is None:
        order = np.arange(n)
        rng = np.random.default_rng(0)
    else:
        rng = np.random.default_rng(shuffle_seed)
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        images = ds.images[idx]
        if mix_ratio is not None:
            clean, aug = mix_ratio
            if clean < 0 or aug < 0 or clean + aug == 0:
                raise ContractError(f"invalid mix ratio {mix_ratio}")
            n_clean = int(round(len(idx) * clean / (clean + aug)))
            images = images.copy()
            for i in range(n_clean, len(idx)):
                images[i] = random_crop_pad(images[i], pad, rng)
        yield images, ds.labels[idx]


def mix_counts(batch_size: int, mix_ratio: tuple[int, int]) -> tuple[int, int]:
    """Clean and augmented sample counts for one full batch."""
    clean, aug = mix_ratio
    n_clean = int(round(batch_size * clean / (clean + aug)))
    return n_clean, batch_size - n_clean
