"""
IDX datasets and the synthetic blob generator

IDX files are big-endian:

    images: [0000] u32 0x00000803  [0004] u32 count  [0008] u32 rows  [0012] u32 cols
            [0016] u8 pixels, row-major
    labels: [0000] u32 0x00000801  [0004] u32 count  [0008] u8 labels
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from ml.errors import FormatError, InvalidArgument
from ml.tensor_core import Rng
from utils.file_io import PathLike, atomic_write_bytes


IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# Blob centres sit in these quadrants (row, col), one per class
QUADRANTS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass
class Dataset:
    """Images scaled to [0, 1] as (count, S, S, 1) float64, plus integer labels"""
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def from_bytes(cls, pixels: np.ndarray, labels: np.ndarray) -> 'Dataset':
        return cls(images=pixels.astype(np.float64)[..., None] / 255.0, labels=labels.astype(np.int64))

    def to_bytes(self) -> Tuple[np.ndarray, np.ndarray]:
        pixels = np.rint(self.images[..., 0] * 255.0).clip(0, 255).astype(np.uint8)
        return pixels, self.labels.astype(np.uint8)

    def subset(self, count: int) -> 'Dataset':
        return Dataset(images=self.images[:count], labels=self.labels[:count])


def encode_idx_images(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    count, rows, cols = pixels.shape
    return struct.pack('>IIII', IMAGES_MAGIC, count, rows, cols) + pixels.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack('>II', LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


def decode_idx_images(payload: bytes) -> np.ndarray:
    if len(payload) < 16:
        raise FormatError("IDX image file shorter than its 16-byte header")
    magic, count, rows, cols = struct.unpack('>IIII', payload[:16])
    if magic != IMAGES_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    expected = count * rows * cols
    if len(payload) - 16 != expected:
        raise FormatError(f"IDX image file holds {len(payload) - 16} pixel bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8, offset=16).reshape(count, rows, cols).copy()


def decode_idx_labels(payload: bytes) -> np.ndarray:
    if len(payload) < 8:
        raise FormatError("IDX label file shorter than its 8-byte header")
    magic, count = struct.unpack('>II', payload[:8])
    if magic != LABELS_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    if len(payload) - 8 != count:
        raise FormatError(f"IDX label file holds {len(payload) - 8} labels, header promises {count}")
    return np.frombuffer(payload, dtype=np.uint8, offset=8).copy()


def read_idx_dataset(images_path: PathLike, labels_path: PathLike) -> Dataset:
    pixels = decode_idx_images(Path(images_path).read_bytes())
    labels = decode_idx_labels(Path(labels_path).read_bytes())
    if pixels.shape[0] != labels.shape[0]:
        raise FormatError(f"{pixels.shape[0]} images but {labels.shape[0]} labels")
    return Dataset.from_bytes(pixels, labels)


def write_idx_dataset(dataset: Dataset, images_path: PathLike, labels_path: PathLike) -> None:
    pixels, labels = dataset.to_bytes()
    atomic_write_bytes(images_path, encode_idx_images(pixels))
    atomic_write_bytes(labels_path, encode_idx_labels(labels))


def synthetic_blobs(count: int, image_size: int, classes: int, seed: int, noise: float = 0.1) -> Dataset:
    """
    Seeded K-class blob images

    Class k puts one bright Gaussian blob in quadrant k (jittered inside it)
    over additive Gaussian noise. Pixels are quantised to bytes so the dataset
    round-trips through IDX exactly; same seed -> byte-identical dataset.
    """
    if not 1 <= classes <= len(QUADRANTS):
        raise InvalidArgument(f"synthetic blobs support 1..{len(QUADRANTS)} classes, got {classes}")
    if count < 1 or image_size < 2:
        raise InvalidArgument(f"need count >= 1 and image_size >= 2, got {count}, {image_size}")

    rng = Rng(seed)
    labels = np.arange(count) % classes
    labels = labels[rng.permutation(count)]

    half = image_size / 2.0
    sigma = image_size / 8.0
    rows, cols = np.mgrid[0:image_size, 0:image_size] + 0.5

    images = np.empty((count, image_size, image_size))
    for i, label in enumerate(labels):
        quad_row, quad_col = QUADRANTS[label]
        jitter = rng.uniform(-image_size / 8.0, image_size / 8.0, 2)
        centre_row = quad_row * half + half / 2.0 + jitter[0]
        centre_col = quad_col * half + half / 2.0 + jitter[1]
        blob = np.exp(-((rows - centre_row) ** 2 + (cols - centre_col) ** 2) / (2.0 * sigma ** 2))
        images[i] = blob + rng.normal(noise, (image_size, image_size)) if noise > 0 else blob

    pixels = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Dataset.from_bytes(pixels, labels.astype(np.uint8))
