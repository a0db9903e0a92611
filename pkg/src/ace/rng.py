"""Counter-based deterministic uniform streams.

Every training draw is keyed by (seed, epoch, level, dimension, observation
index) and produced by an integer avalanche mix, so the sequence is
reproducible regardless of scheduling or batch order and never advances
hidden state.  Values lie strictly inside (0, 1).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xFF51AFD7ED558CCD)
_MIX2 = np.uint64(0xC4CEB9FE1A85EC53)
_S33 = np.uint64(33)


def _mix64(h: np.ndarray) -> np.ndarray:
    h = h ^ (h >> _S33)
    h = h * _MIX1
    h = h ^ (h >> _S33)
    h = h * _MIX2
    h = h ^ (h >> _S33)
    return h


def _fold(h, value) -> np.ndarray:
    v = np.asarray(value).astype(np.uint64)
    return _mix64(h ^ (v * _GOLDEN + _GOLDEN))


def uniform_open(seed: int, epoch: int, level: int, dim: int, obs) -> np.ndarray:
    """Uniforms in (0,1) for an array of observation indices."""
    obs = np.atleast_1d(np.asarray(obs, dtype=np.uint64))
    h = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN)
    for component in (epoch, level, dim):
        h = _fold(h, np.uint64(component & 0xFFFFFFFFFFFFFFFF))
    h = _fold(np.broadcast_to(h, obs.shape).copy(), obs)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def uniform_matrix(seed: int, epoch: int, level: int, obs, n_dims: int) -> np.ndarray:
    """[len(obs), n_dims] of uniforms, one independent stream per dimension."""
    obs = np.atleast_1d(np.asarray(obs, dtype=np.int64))
    out = np.empty((obs.size, n_dims), dtype=np.float64)
    for d in range(n_dims):
        out[:, d] = uniform_open(seed, epoch, level, d, obs)
    return out


# Reserved epoch slot for draws outside training (e.g. re-sampling panels).
RESAMPLE_STREAM = 0x7FFFFFFF
