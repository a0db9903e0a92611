"""Two-level image pyramid with exact reconstruction.

An image splits into a coarse band (2x2 max pooling) and a full-resolution
residual (image minus the re-upsampled coarse band).  Max pooling makes the
decomposition nonlinear, but reconstruction is exact because the residual
stores whatever the repeated upsampling misses.  For inputs in [0, 1] the
residual lies in [-1, 0].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


def _maxpool(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    blocks = x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2))
    return blocks.max(axis=(-3, -1))


def _upsample(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


@dataclass
class PyramidDecomposition:
    coarse: np.ndarray
    residual: np.ndarray


def _check_image(image: np.ndarray):
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a [3,H,W] image, got {image.shape}")
    if image.shape[1] % 2 or image.shape[2] % 2:
        raise ShapeError(f"image extents must be even, got {image.shape}")


def decompose(image) -> PyramidDecomposition:
    """coarse = maxpool2(image); residual = image - upsample_repeat2(coarse)."""
    image = np.asarray(image, dtype=np.float64)
    _check_image(image)
    coarse = _maxpool(image)
    residual = image - _upsample(coarse)
    return PyramidDecomposition(coarse=coarse, residual=residual)


def reconstruct(d: PyramidDecomposition) -> np.ndarray:
    coarse = np.asarray(d.coarse, dtype=np.float64)
    residual = np.asarray(d.residual, dtype=np.float64)
    up = _upsample(coarse)
    if up.shape != residual.shape:
        raise ShapeError(f"coarse {coarse.shape} does not upsample to residual {residual.shape}")
    return up + residual


def decompose_batch(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(coarse, residual) bands of a [B,3,H,W] stack."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected [B,3,H,W], got {images.shape}")
    if images.shape[2] % 2 or images.shape[3] % 2:
        raise ShapeError(f"image extents must be even, got {images.shape}")
    coarse = _maxpool(images)
    residual = images - _upsample(coarse)
    return coarse, residual


def reconstruct_batch(coarse: np.ndarray, residual: np.ndarray) -> np.ndarray:
    up = _upsample(np.asarray(coarse, dtype=np.float64))
    residual = np.asarray(residual, dtype=np.float64)
    if up.shape != residual.shape:
        raise ShapeError(f"coarse {coarse.shape} does not upsample to residual {residual.shape}")
    return up + residual
