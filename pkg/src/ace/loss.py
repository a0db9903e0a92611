"""Per-observation VAE loss over both pyramid levels and the weighted
minibatch objective.

The reconstruction density is an isotropic unit-variance Gaussian, so the
per-band reconstruction error is 0.5 * ||x - x_hat||^2 + (dim/2) * ln(2*pi),
evaluated at a single sampled latent per observation per epoch.  Each
latent dimension adds the closed-form generative error against its target
(the prior on the first run, registry drifts afterwards).

The minibatch objective is  sum_i W_i * loss_i + sum_i W_i  with weights W
produced by the classifier; gradients flow into the network parameters and,
through the softmax, into the classifier logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import laplace
from . import pyramid
from . import tensor as T

LEVELS = (1, 2)


class WeightInvariantError(RuntimeError):
    """Minibatch weights violated their sum or ratio invariant."""


@dataclass
class LossBreakdown:
    """Detached per-observation components of one forward pass."""

    rec_per_level: dict[int, np.ndarray]
    gen_per_level: dict[int, np.ndarray]
    gen_per_dim: dict[int, np.ndarray]
    per_obs_total: np.ndarray
    weighted_total: float | None = None


def reconstruction_error(target_band, decoded_band) -> T.Tensor:
    """Negative Gaussian log-density of the band given its reconstruction, [B]."""
    target = np.asarray(target_band, dtype=np.float64)
    decoded = T.as_tensor(decoded_band)
    if target.shape != decoded.shape:
        raise T.ShapeError(f"band shape {target.shape} does not match reconstruction {decoded.shape}")
    diff = decoded - T.constant(target)
    dim = target.shape[-1]
    return T.tensor_sum(diff * diff, axis=-1) * 0.5 + dim / 2.0 * math.log(2.0 * math.pi)


def flatten_bands(images: np.ndarray) -> dict[int, np.ndarray]:
    """Pyramid bands of an image stack, flattened per level (1=residual, 2=coarse)."""
    coarse, residual = pyramid.decompose_batch(images)
    n = images.shape[0]
    return {1: residual.reshape(n, -1), 2: coarse.reshape(n, -1)}


def prior_targets(n: int, latent_dim: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    p = laplace.prior()
    mu = np.full((n, latent_dim), p.mu)
    sigma = np.full((n, latent_dim), p.sigma)
    return {level: (mu, sigma) for level in LEVELS}


def vae_loss(
    model,
    images: np.ndarray,
    labels,
    targets: dict[int, tuple[np.ndarray, np.ndarray]],
    u: dict[int, np.ndarray],
    *,
    decode_class: int,
    training: bool,
    update_running: bool = True,
) -> tuple[T.Tensor, LossBreakdown]:
    """Per-observation total loss [B] plus its detached breakdown.

    ``targets[level]`` holds (mu2, sigma2) arrays of shape [B, latent];
    ``u[level]`` the uniform draws for this epoch.  The whole minibatch is
    decoded with ``decode_class`` (class routing is the trainer's concern);
    sampler heads always use each observation's own class.
    """
    bands = flatten_bands(images)
    total: T.Tensor | None = None
    rec_per_level: dict[int, np.ndarray] = {}
    gen_per_level: dict[int, np.ndarray] = {}
    gen_per_dim: dict[int, np.ndarray] = {}
    for level in LEVELS:
        x = bands[level]
        hidden = model.encode(x, level, training=training, update_running=update_running)
        mu, sigma = model.posterior(hidden, labels, level)
        if level not in targets:
            raise KeyError(f"missing generative targets for level {level}")
        target_mu, target_sigma = targets[level]
        shift = laplace.standard_sample(u[level]) * laplace.SQRT_HALF
        z = mu + sigma * T.constant(shift)
        decoded = model.decode(z, decode_class, level, training=training, update_running=update_running)
        rec = reconstruction_error(x, decoded)
        gen_dims = laplace.generative_error_graph(mu, sigma, target_mu, target_sigma)
        gen = T.tensor_sum(gen_dims, axis=-1)
        level_total = rec + gen
        total = level_total if total is None else total + level_total
        rec_per_level[level] = rec.data.copy()
        gen_per_level[level] = gen.data.copy()
        gen_per_dim[level] = gen_dims.data.copy()
    breakdown = LossBreakdown(
        rec_per_level=rec_per_level,
        gen_per_level=gen_per_level,
        gen_per_dim=gen_per_dim,
        per_obs_total=total.data.copy(),
    )
    return total, breakdown


def check_weight_invariants(weights: np.ndarray, ratio_cap: float):
    n = weights.shape[0]
    if np.any(weights <= 0.0):
        raise WeightInvariantError("observation weights must be positive")
    total = float(weights.sum())
    if abs(total - n) > 1e-6 * n:
        raise WeightInvariantError(f"weights sum to {total}, expected {n}")
    ratio = float(weights.max() / weights.min())
    if ratio > ratio_cap * (1.0 + 1e-9):
        raise WeightInvariantError(f"weight ratio {ratio} exceeds cap {ratio_cap}")


def weighted_minibatch_loss(
    model,
    images: np.ndarray,
    labels,
    weights: T.Tensor,
    targets: dict[int, tuple[np.ndarray, np.ndarray]],
    u: dict[int, np.ndarray],
    *,
    decode_class: int,
    training: bool,
    update_running: bool = True,
) -> tuple[T.Tensor, LossBreakdown]:
    """sum_i W_i * loss_i + sum_i W_i as a scalar Tensor, invariants checked first."""
    if weights.shape[0] != images.shape[0]:
        raise T.ShapeError(f"{weights.shape[0]} weights for {images.shape[0]} observations")
    check_weight_invariants(weights.data, model.config.weight_ratio_cap)
    per_obs, breakdown = vae_loss(
        model,
        images,
        labels,
        targets,
        u,
        decode_class=decode_class,
        training=training,
        update_running=update_running,
    )
    total = T.tensor_sum(weights * per_obs) + T.tensor_sum(weights)
    breakdown.weighted_total = total.item()
    return total, breakdown
