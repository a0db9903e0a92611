"""Dataset ingestion and image output.

Input files use the standard CIFAR-10 binary layout: records of 3073 bytes,
one label byte followed by 3072 pixel bytes in channel-major (R, G, B) plane
order, row-major within each plane.  Record order is preserved, with files
concatenated in canonical (sorted) filename order.  Pixels are normalized to
[0, 1] as x / 255 exactly; no other preprocessing is applied, so observation
indices stay aligned with the on-disk order for the life of a run.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64

    def __len__(self):
        return self.images.shape[0]


def load_cifar10(paths) -> Dataset:
    """Parse CIFAR-10 binary batch files, preserving record order."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise DataFormatError("no data files given")
    paths = sorted(paths, key=lambda p: p.name)
    images = []
    labels = []
    for path in paths:
        blob = path.read_bytes()
        if len(blob) == 0 or len(blob) % RECORD_BYTES:
            raise DataFormatError(f"{path}: size {len(blob)} is not a multiple of {RECORD_BYTES}")
        raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
        batch_labels = raw[:, 0].astype(np.int64)
        if batch_labels.max(initial=0) > 9:
            raise DataFormatError(f"{path}: label byte {batch_labels.max()} out of range 0..9")
        labels.append(batch_labels)
        images.append(raw[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float64) / 255.0)
    return Dataset(images=np.concatenate(images), labels=np.concatenate(labels))


def write_cifar_batch(images_u8: np.ndarray, labels, path):
    """Inverse of the loader: emit one binary batch file from uint8 images."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images_u8.shape[1:] != IMAGE_SHAPE or images_u8.shape[0] != labels.shape[0]:
        raise DataFormatError(f"need [N,3,32,32] images with N labels, got {images_u8.shape}")
    records = np.concatenate([labels[:, None], images_u8.reshape(len(labels), -1)], axis=1)
    Path(path).write_bytes(records.astype(np.uint8).tobytes())


def discover(data_dir) -> tuple[list[Path], list[Path]]:
    """(train files, test files) under a directory of standard batch names."""
    data_dir = Path(data_dir)
    train = sorted(data_dir.glob("data_batch_*.bin"))
    test = sorted(data_dir.glob("test_batch*.bin"))
    return train, test


def subset(dataset: Dataset, count: int) -> Dataset:
    if count > len(dataset):
        raise DataFormatError(f"subset of {count} from dataset of {len(dataset)}")
    return Dataset(images=dataset.images[:count], labels=dataset.labels[:count])


def checksum(dataset: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.images).tobytes())
    h.update(np.ascontiguousarray(dataset.labels).tobytes())
    return h.hexdigest()


# -- PNG output ----------------------------------------------------------------


def quantize(image: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and round half away from zero to 8-bit."""
    clipped = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def write_png(image: np.ndarray, path):
    """Write a [3,H,W] float image (any range) as an 8-bit RGB PNG."""
    arr = quantize(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataFormatError(f"write_png expects [3,H,W], got {arr.shape}")
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(os.fspath(path))


def read_png(path) -> np.ndarray:
    """Read an RGB PNG back as [3,H,W] floats in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def tile_sheet(images: np.ndarray, cols: int, gutter: int = 2, background: float = 0.0) -> np.ndarray:
    """Row-major grid of [N,3,h,w] tiles with ``gutter``-pixel separators."""
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    rows = (n + cols - 1) // cols
    sheet = np.full(
        (c, rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter),
        background,
        dtype=np.float64,
    )
    for i in range(n):
        r, cc = divmod(i, cols)
        y = r * (h + gutter)
        x = cc * (w + gutter)
        sheet[:, y : y + h, x : x + w] = images[i]
    return sheet
