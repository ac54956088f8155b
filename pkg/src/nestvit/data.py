"""Datasets: CIFAR-10 binary ingestion and the synthetic quadrant task.

CIFAR-10 ships as files of 3073-byte records: one label byte followed by the
32x32 red, green and blue planes (channel-major, row-major within a plane).
The synthetic task paints a bright square inside one quadrant per class so
that interpretability tools have pixel-exact ground truth: class k lights a
centered square in quadrant k mod 4 (raster order TL, TR, BL, BR) using the
channel signature CHANNEL_SETS[(k % 4 + k // 4) % 4].  The square is inset
from the quadrant border so the class evidence stays strictly interior to its
quadrant even after a few pixels of receptive-field growth, and the four
channel signatures ({R}, {G}, {B}, {R,G,B}) are pairwise distinct so every
class is identifiable from its painted pixels' colors alone; classes sharing
a quadrant (k and k+4) carry different signatures.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073                      # 1 label byte + 3 * 32 * 32 pixels
CIFAR_SIDE = 32
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DataError(ValueError):
    """Ingestion failure: truncated file, bad label, malformed record."""


@dataclass
class Dataset:
    images: np.ndarray                   # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray                   # (N,) int64
    split: str

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.labels)

    def validate(self) -> "Dataset":
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise DataError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and self.labels.min() < 0:
            raise DataError(f"negative label {self.labels.min()}")
        return self


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def encode_cifar_record(image: np.ndarray, label: int) -> bytes:
    """Pack one (32, 32, 3) float image in [0, 1] into the 3073-byte record
    format. The decoder's test oracle: decode(encode(x)) must round-trip."""
    img = np.asarray(image)
    if img.shape != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise DataError(f"expected (32, 32, 3) image, got {img.shape}")
    if not 0 <= label < CIFAR_CLASSES:
        raise DataError(f"label {label} outside [0, {CIFAR_CLASSES})")
    planes = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return bytes([label]) + planes.transpose(2, 0, 1).tobytes()


def decode_cifar_records(raw: bytes, origin: str = "<bytes>"
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Decode a buffer of whole records to ((N,32,32,3) float32, (N,) labels)."""
    extra = len(raw) % RECORD_BYTES
    if extra:
        raise DataError(
            f"{origin}: truncated record at byte offset {len(raw) - extra} "
            f"({extra} trailing bytes, record size is {RECORD_BYTES})")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rows[:, 0].astype(np.int64)
    if len(labels) and labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise DataError(
            f"{origin}: record {bad} has label byte {labels[bad]}, "
            f"valid range is 0..{CIFAR_CLASSES - 1}")
    pixels = rows[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = pixels.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_cifar_records(fh.read(), origin=str(path))


def load_cifar10(root, split: str = "train") -> Dataset:
    """Load the standard binary batches from ``root``."""
    if split == "train":
        files = CIFAR_TRAIN_FILES
    elif split == "test":
        files = CIFAR_TEST_FILES
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    parts = [load_cifar10_file(os.path.join(root, name)) for name in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, split)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over (N, H, W), computed in float64."""
    flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
    return flat.mean(axis=0), flat.std(axis=0)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError(f"non-positive std {std}")
    return ((images - mean) / std).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic quadrant task
# ---------------------------------------------------------------------------


def quadrant_slices(size: int, quadrant: int) -> tuple[slice, slice]:
    """Raster-order quadrants: 0=TL, 1=TR, 2=BL, 3=BR."""
    if size % 2:
        raise ValueError(f"image size {size} is odd, quadrants are ambiguous")
    if not 0 <= quadrant < 4:
        raise ValueError(f"quadrant {quadrant} outside 0..3")
    h = size // 2
    rows = slice(0, h) if quadrant < 2 else slice(h, size)
    cols = slice(0, h) if quadrant % 2 == 0 else slice(h, size)
    return rows, cols


CHANNEL_SETS = ((0,), (1,), (2,), (0, 1, 2))


def painted_channels(label: int) -> tuple[int, ...]:
    """Channel signature for a class: a latin-square pairing of quadrant and
    color set, so no two classes share both."""
    return CHANNEL_SETS[(label % 4 + label // 4) % 4]


def painted_slices(size: int, quadrant: int) -> tuple[slice, slice]:
    """The painted region for a class: a centered square of side size // 4
    inside the quadrant, inset so it never touches the quadrant border."""
    rows, cols = quadrant_slices(size, quadrant)
    side = max(1, size // 4)
    off = (size // 2 - side) // 2
    return (slice(rows.start + off, rows.start + off + side),
            slice(cols.start + off, cols.start + off + side))


def synth_dataset(n: int, image_size: int = 16, num_classes: int = 4,
                  seed: int = 0, split: str = "train") -> Dataset:
    """Class-conditional quadrant patterns with an exactly balanced label
    histogram (up to the remainder when n % num_classes != 0)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    images = rng.normal(0.1, 0.03, size=(n, image_size, image_size, 3))
    for i, k in enumerate(labels):
        rows, cols = painted_slices(image_size, int(k) % 4)
        for channel in painted_channels(int(k)):
            patch = images[i, rows, cols, channel]
            images[i, rows, cols, channel] = (
                0.8 + rng.normal(0.0, 0.05, patch.shape))
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels, split)
