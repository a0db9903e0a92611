"""Creative-regime outputs: perturbation grids around a well-reconstructed
observation, latent interpolation, and the zero-drift baseline.

A grid sweeps one pyramid level's two latent dimensions over an equally
spaced deterministic lattice of offsets, added directly to the observation's
drift in prior standard-deviation units (the learned per-observation sigma is
deliberately ignored); the other level stays pinned at its drift.  The center
cell carries zero offset and reproduces the plain drift decode bit for bit.
All decodes run in eval mode, one image at a time, so outputs are a pure
function of (checkpoint, registry, spec).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from . import pyramid
from . import tensor as T
from .trainer import DriftRegistry


@dataclass(frozen=True)
class GridSpec:
    center_index: int | None = None
    n_per_axis: int = 15
    span: float = 7.0
    varied_level: int = 2

    def __post_init__(self):
        if self.n_per_axis < 2:
            raise ValueError("grid needs at least 2 points per axis")
        if self.span <= 0:
            raise ValueError("grid span must be positive")
        if self.varied_level not in (1, 2):
            raise ValueError("varied_level must be 1 or 2")


def grid_values(spec: GridSpec) -> np.ndarray:
    return np.linspace(-spec.span, spec.span, spec.n_per_axis)


def decode_latents(model, class_label: int, z_by_level: dict[int, np.ndarray]) -> np.ndarray:
    """Decode one latent pair per level into a [3,H,W] image (eval mode)."""
    size = model.config.image_size
    with T.no_grad():
        residual = model.decode(
            z_by_level[1].reshape(1, -1), class_label, 1, training=False, update_running=False
        ).data.reshape(3, size, size)
        coarse = model.decode(
            z_by_level[2].reshape(1, -1), class_label, 2, training=False, update_running=False
        ).data.reshape(3, size // 2, size // 2)
    return pyramid.reconstruct(pyramid.PyramidDecomposition(coarse=coarse, residual=residual))


def _drifts(registry: DriftRegistry, index: int) -> dict[int, np.ndarray]:
    entry = registry.drifts(index)
    out = {}
    for level in (1, 2):
        if level not in entry:
            raise ValueError(f"registry has no level-{level} rows for observation {index}")
        out[level] = entry[level][0].copy()
    return out


def decode_at(model, registry: DriftRegistry, index: int, class_label: int) -> np.ndarray:
    """Decode an observation's drift exactly (zero noise) at both levels."""
    drift = _drifts(registry, index)
    return decode_latents(model, class_label, drift)


def perturbation_grid(model, registry: DriftRegistry, spec: GridSpec, class_label: int) -> np.ndarray:
    """n*n images, row-major: row r sets the y offset, column c the x offset."""
    if spec.center_index is None:
        raise ValueError("perturbation grid needs a center observation")
    drift = _drifts(registry, spec.center_index)
    return _sweep(model, spec, class_label, drift)


def zero_drift_baseline(model, spec: GridSpec, class_label: int) -> np.ndarray:
    """The same sweep centered on the all-zero latent; no registry involved."""
    latent_dim = model.config.latent_dim
    drift = {level: np.zeros(latent_dim) for level in (1, 2)}
    return _sweep(model, spec, class_label, drift)


def _sweep(model, spec: GridSpec, class_label: int, drift: dict[int, np.ndarray]) -> np.ndarray:
    values = grid_values(spec)
    size = model.config.image_size
    out = np.empty((spec.n_per_axis * spec.n_per_axis, 3, size, size))
    for r, gy in enumerate(values):
        for c, gx in enumerate(values):
            z = {level: mu.copy() for level, mu in drift.items()}
            if gx != 0.0 or gy != 0.0:
                z[spec.varied_level] = drift[spec.varied_level] + np.array([gx, gy])
            out[r * spec.n_per_axis + c] = decode_latents(model, class_label, z)
    return out


def interpolate(
    model,
    registry: DriftRegistry,
    index_a: int,
    index_b: int,
    steps: int,
    class_a: int,
    class_b: int,
) -> np.ndarray:
    """Equally spaced latent path between two drifts, decoded per step.

    Both observations must share a class because the decoder is
    class-specific; endpoints reuse the drifts exactly.
    """
    if class_a != class_b:
        raise ValueError(f"cannot interpolate across classes {class_a} and {class_b}")
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    da = _drifts(registry, index_a)
    db = _drifts(registry, index_b)
    size = model.config.image_size
    out = np.empty((steps, 3, size, size))
    for s in range(steps):
        t = s / (steps - 1)
        if s == 0:
            z = da
        elif s == steps - 1:
            z = db
        else:
            z = {level: (1.0 - t) * da[level] + t * db[level] for level in (1, 2)}
        out[s] = decode_latents(model, class_a, z)
    return out


# -- file layout -----------------------------------------------------------------


def write_grid_outputs(images: np.ndarray, spec: GridSpec, out_dir) -> dict:
    """Sheet PNG, one PNG per cell, and a cell -> (g_x, g_y) index file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sheet_path = out_dir / "sheet.png"
    dataio.write_png(dataio.tile_sheet(images, cols=spec.n_per_axis), sheet_path)
    cells_dir = out_dir / "cells"
    cells_dir.mkdir(exist_ok=True)
    values = grid_values(spec)
    index_path = out_dir / "cells.csv"
    paths = [str(sheet_path), str(index_path)]
    with open(index_path, "w") as f:
        f.write("cell,row,col,g_x,g_y\n")
        for r in range(spec.n_per_axis):
            for c in range(spec.n_per_axis):
                cell = r * spec.n_per_axis + c
                cell_path = cells_dir / f"cell_r{r:02d}_c{c:02d}.png"
                dataio.write_png(images[cell], cell_path)
                paths.append(str(cell_path))
                f.write(f"{cell},{r},{c},{values[c]:.17g},{values[r]:.17g}\n")
    return {"sheet": str(sheet_path), "index": str(index_path), "paths": paths}


def write_strip_outputs(images: np.ndarray, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    strip_path = out_dir / "strip.png"
    dataio.write_png(dataio.tile_sheet(images, cols=images.shape[0]), strip_path)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(exist_ok=True)
    paths = [str(strip_path)]
    for i in range(images.shape[0]):
        p = frames_dir / f"step_{i:03d}.png"
        dataio.write_png(images[i], p)
        paths.append(str(p))
    return {"strip": str(strip_path), "paths": paths}
