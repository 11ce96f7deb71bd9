"""Dataset ingestion: CIFAR-10 binary batches and synthetic class blobs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Dataset", "CifarFormatError", "load_cifar10", "synth_dataset"]

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


class CifarFormatError(ValueError):
    """The bytes on disk are not valid CIFAR-10 binary batches."""


@dataclass
class Dataset:
    images: np.ndarray     # [N, 3, H, W], values in [0, 1]
    labels: np.ndarray     # [N] integer class ids
    classes: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on sample count")
        if self.images.shape[0] == 0:
            raise ValueError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError("label outside [0, classes)")

    def __len__(self) -> int:
        return int(self.images.shape[0])


def load_cifar10(path, dtype=np.float64) -> Dataset:
    """Parse CIFAR-10 binary batch files.

    ``path`` may be a single ``.bin`` file or a directory of them. Each
    record is 3073 bytes: one label byte, then 3072 bytes of 3x32x32
    row-major channel planes. Pixels are scaled to [0, 1].
    """
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.bin"))
        if not files:
            raise CifarFormatError(f"no .bin batch files under {p}")
    else:
        files = [p]
    raw = b"".join(f.read_bytes() for f in files)
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        raise CifarFormatError(
            f"file length {len(raw)} is not a multiple of {RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise CifarFormatError(f"label {labels.max()} out of range for CIFAR-10")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(dtype) / 255.0
    return Dataset(images=images, labels=labels, classes=10)


def synth_dataset(seed: int, n: int, classes: int, size: int = 8,
                  noise: float = 0.08, dtype=np.float64) -> Dataset:
    """Deterministic class-conditional Gaussian blobs.

    Class k gets a distinct per-channel mean pattern; labels are assigned
    round-robin so every class appears floor(n/classes) or one more
    times. Linearly separable by construction.
    """
    if n < classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    levels = np.linspace(0.15, 0.85, classes)
    labels = np.arange(n, dtype=np.int64) % classes
    means = np.stack([levels[(labels + c) % classes] for c in range(3)], axis=1)
    images = means[:, :, None, None] + noise * rng.standard_normal(
        (n, 3, size, size)
    )
    images = np.clip(images, 0.0, 1.0).astype(dtype)
    return Dataset(images=images, labels=labels, classes=classes)
