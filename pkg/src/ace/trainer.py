"""Training orchestration: the two-run drift protocol.

Run 1 trains against the prior and ends by recording every observation's
attained (mu, sigma) per level per latent dimension into a drift registry.
Run 2 (and onwards) warm-starts from the previous run's checkpoint and trains
against the registry's per-observation targets, so the generative error is
exactly zero at the moment run 2 begins and the re-used drifts stay matched.

Minibatches slice the dataset in its initial on-disk order (observation i
belongs to minibatch i // batch_size); there is no shuffling, because
hard-coded indices, class routing, and the drift registry are all tied to
stable minibatch membership.  Each minibatch is decoded with a single class:
the hard-coded observation's class where one is present, otherwise the class
of the current maximum-weight observation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import dataio
from . import laplace
from . import loss as loss_mod
from . import rng
from . import tensor as T
from .model import AutoClassifierEncoder, ModelConfig
from .optim import Adam

METRICS_HEADER = (
    "epoch,mean_rec_level1,mean_rec_level2,mean_gen_level1,mean_gen_level2,"
    "weighted_total,max_weight_index"
)


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, minibatch {batch}")
        self.epoch = epoch
        self.batch = batch


class RegistryError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1000
    seed: int = 0
    hardcoded_indices: tuple[int, ...] = (8, 1020, 2016)
    run_number: int = 1
    learning_rate: float = 1e-3
    half_decay_epochs: float = 100.0
    subset: int | None = None
    checkpoint_every: int = 0
    init_checkpoint: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def desk_profile(cls, seed: int = 7, **overrides) -> "TrainConfig":
        """1,000-observation, batch-100, 30-epoch profile for one CPU core."""
        base = dict(
            epochs=30,
            batch_size=100,
            seed=seed,
            hardcoded_indices=(8, 120, 216),
            subset=1000,
        )
        base.update(overrides)
        return cls(**base)


# -- drift registry -------------------------------------------------------------


class DriftRegistry:
    """Per-observation (mu, sigma) per pyramid level per latent dimension."""

    def __init__(self, entries: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] | None = None):
        self._entries: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] = entries or {}

    def __len__(self):
        return len(self._entries)

    def __contains__(self, index: int):
        return int(index) in self._entries

    def indices(self) -> list[int]:
        return sorted(self._entries)

    def put(self, index: int, level: int, mu: np.ndarray, sigma: np.ndarray):
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0.0):
            raise RegistryError(f"sigma must be positive for observation {index}, level {level}")
        self._entries.setdefault(int(index), {})[int(level)] = (
            np.asarray(mu, dtype=np.float64).copy(),
            sigma.copy(),
        )

    def drifts(self, index: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        try:
            return self._entries[int(index)]
        except KeyError:
            raise RegistryError(f"no drift rows for observation {index}") from None

    def require_complete(self, indices, levels=(1, 2)):
        missing = [
            (int(i), level)
            for i in indices
            for level in levels
            if int(i) not in self._entries or level not in self._entries[int(i)]
        ]
        if missing:
            raise RegistryError(f"registry incomplete: missing {missing[:5]} (+{max(len(missing) - 5, 0)} more)")

    def target_arrays(self, indices, level: int) -> tuple[np.ndarray, np.ndarray]:
        """(mu2, sigma2) stacked [len(indices), latent_dim] for one level."""
        mus, sigmas = [], []
        for i in indices:
            entry = self.drifts(int(i))
            if level not in entry:
                raise RegistryError(f"no level-{level} drift for observation {i}")
            mu, sigma = entry[level]
            mus.append(mu)
            sigmas.append(sigma)
        return np.stack(mus), np.stack(sigmas)

    def __eq__(self, other):
        if not isinstance(other, DriftRegistry):
            return NotImplemented
        if self.indices() != other.indices():
            return False
        for i in self.indices():
            a, b = self._entries[i], other._entries[i]
            if sorted(a) != sorted(b):
                return False
            for level in a:
                if not (np.array_equal(a[level][0], b[level][0]) and np.array_equal(a[level][1], b[level][1])):
                    return False
        return True

    def save(self, path):
        """Plain text, one row per (observation, level, dimension), 17 significant digits."""
        with open(path, "w") as f:
            f.write("index,level,dim,mu,sigma\n")
            for index in self.indices():
                for level in sorted(self._entries[index]):
                    mu, sigma = self._entries[index][level]
                    for dim in range(mu.shape[0]):
                        f.write(f"{index},{level},{dim},{mu[dim]:.17g},{sigma[dim]:.17g}\n")

    @classmethod
    def load(cls, path) -> "DriftRegistry":
        rows: dict[tuple[int, int], dict[int, tuple[float, float]]] = {}
        with open(path) as f:
            header = f.readline().strip()
            if header != "index,level,dim,mu,sigma":
                raise RegistryError(f"bad registry header in {path}: {header!r}")
            for line_no, line in enumerate(f, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 5:
                    raise RegistryError(f"{path}:{line_no}: expected 5 fields, got {len(parts)}")
                index, level, dim = int(parts[0]), int(parts[1]), int(parts[2])
                rows.setdefault((index, level), {})[dim] = (float(parts[3]), float(parts[4]))
        registry = cls()
        for (index, level), dims in rows.items():
            order = sorted(dims)
            if order != list(range(len(order))):
                raise RegistryError(f"non-contiguous dims for observation {index}, level {level}")
            mu = np.array([dims[d][0] for d in order])
            sigma = np.array([dims[d][1] for d in order])
            registry.put(index, level, mu, sigma)
        return registry


# -- checkpoint helpers -----------------------------------------------------------


def save_model_checkpoint(path, model: AutoClassifierEncoder, adam: Adam | None = None, meta: dict | None = None):
    arrays = dict(model.state_arrays())
    if adam is not None:
        arrays.update(adam.state_arrays())
    meta_all = model.config.meta_arrays()
    if meta:
        meta_all.update({k: np.asarray(v, dtype=np.float64) for k, v in meta.items()})
    arrays.update({f"meta.{k}": v for k, v in meta_all.items()})
    ckpt.write_arrays(path, arrays)


def load_model_checkpoint(path) -> tuple[AutoClassifierEncoder, Adam, dict]:
    model_state, adam_state, meta = ckpt.split_sections(ckpt.read_arrays(path))
    config = ModelConfig.from_meta(meta)
    model = AutoClassifierEncoder(config, seed=0)
    model.load_state_arrays(model_state)
    adam = Adam(model.params)
    if adam_state:
        adam.load_state_arrays(adam_state)
    return model, adam, meta


# -- evaluation passes -------------------------------------------------------------


def eval_posteriors(model: AutoClassifierEncoder, images: np.ndarray, labels, chunk: int = 2000):
    """Eval-mode (mu, sigma) per observation: {level: (mu [N,d], sigma [N,d])}."""
    n = images.shape[0]
    d = model.config.latent_dim
    out = {level: (np.empty((n, d)), np.empty((n, d))) for level in loss_mod.LEVELS}
    with T.no_grad():
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            bands = loss_mod.flatten_bands(images[start:stop])
            labs = np.asarray(labels[start:stop])
            for level in loss_mod.LEVELS:
                hidden = model.encode(bands[level], level, training=False, update_running=False)
                mu, sigma = model.posterior(hidden, labs, level)
                out[level][0][start:stop] = mu.data
                out[level][1][start:stop] = sigma.data
    return out


def extract_drifts(model: AutoClassifierEncoder, dataset: dataio.Dataset) -> DriftRegistry:
    """Deterministic eval-mode head outputs for every observation's own class."""
    posts = eval_posteriors(model, dataset.images, dataset.labels)
    registry = DriftRegistry()
    for i in range(len(dataset)):
        for level in loss_mod.LEVELS:
            registry.put(i, level, posts[level][0][i], posts[level][1][i])
    return registry


def eval_reconstructions(
    model: AutoClassifierEncoder, images: np.ndarray, labels, u: dict[int, np.ndarray] | None = None
) -> np.ndarray:
    """Eval-mode reconstructions through both levels, decoding each observation
    with its own class.  With ``u`` omitted the latent is the drift itself
    (the median draw u = 0.5); otherwise z = mu + sigma*sqrt(0.5)*s(u)."""
    labels = np.asarray(labels)
    n = images.shape[0]
    decoded = {}
    with T.no_grad():
        bands = loss_mod.flatten_bands(images)
        for level in loss_mod.LEVELS:
            hidden = model.encode(bands[level], level, training=False, update_running=False)
            mu, sigma = model.posterior(hidden, labels, level)
            z = mu.data
            if u is not None:
                z = z + sigma.data * laplace.SQRT_HALF * laplace.standard_sample(u[level])
            out = np.empty((n, model.config.band_dim(level)))
            for k in np.unique(labels):
                idx = np.flatnonzero(labels == k)
                out[idx] = model.decode(z[idx], int(k), level, training=False, update_running=False).data
            decoded[level] = out
    half = model.config.image_size // 2
    coarse = decoded[2].reshape(n, 3, half, half)
    residual = decoded[1].reshape(n, 3, model.config.image_size, model.config.image_size)
    from .pyramid import reconstruct_batch

    return reconstruct_batch(coarse, residual)


def reconstruction_report(model: AutoClassifierEncoder, images: np.ndarray, labels) -> np.ndarray:
    """Per-observation per-pixel MSE of the eval-mode reconstruction."""
    recon = eval_reconstructions(model, images, labels)
    return np.mean((images - recon) ** 2, axis=(1, 2, 3))


def generative_errors_at_targets(
    model: AutoClassifierEncoder, dataset: dataio.Dataset, registry: DriftRegistry
) -> np.ndarray:
    """Closed-form generative error of eval-mode posteriors against registry
    targets, summed over levels and dimensions: [N]."""
    posts = eval_posteriors(model, dataset.images, dataset.labels)
    n = len(dataset)
    total = np.zeros(n)
    indices = np.arange(n)
    for level in loss_mod.LEVELS:
        mu1, sigma1 = posts[level]
        mu2, sigma2 = registry.target_arrays(indices, level)
        delta = np.abs(mu1 - mu2)
        ge = (
            np.log(sigma1)
            - np.log(sigma2)
            + delta / (laplace.SQRT_HALF * sigma2)
            + (sigma1 / sigma2) * np.exp(-delta / (sigma1 * laplace.SQRT_HALF))
            - 1.0
        )
        total += ge.sum(axis=1)
    return total


# -- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    model: AutoClassifierEncoder
    adam: Adam
    registry: DriftRegistry
    metrics_lines: list[str]
    dominant_indices: list[list[int]]
    config: TrainConfig


def _validate(config: TrainConfig, n: int):
    if config.batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    if n % config.batch_size:
        raise ValueError(f"batch_size {config.batch_size} does not divide training-set size {n}")
    seen_batches: dict[int, int] = {}
    for i in config.hardcoded_indices:
        if not 0 <= i < n:
            raise ValueError(f"hardcoded index {i} outside dataset of {n}")
        b = i // config.batch_size
        if b in seen_batches:
            raise ValueError(
                f"hardcoded indices {seen_batches[b]} and {i} land in the same minibatch {b}"
            )
        seen_batches[b] = i


def _build_targets(config: TrainConfig, n: int, registry: DriftRegistry | None):
    if config.run_number <= 1:
        return loss_mod.prior_targets(n, config.model.latent_dim)
    assert registry is not None
    indices = np.arange(n)
    return {level: registry.target_arrays(indices, level) for level in loss_mod.LEVELS}


def train_run(
    config: TrainConfig,
    dataset: dataio.Dataset,
    registry: DriftRegistry | None = None,
    checkpoint_dir=None,
) -> TrainResult:
    """One optimization run of the protocol; returns the refreshed registry."""
    data = dataio.subset(dataset, config.subset) if config.subset else dataset
    n = len(data)
    _validate(config, n)
    if config.run_number >= 2:
        if registry is None:
            raise RegistryError(f"run {config.run_number} requires a drift registry")
        registry.require_complete(range(n))
        if not config.init_checkpoint:
            raise ValueError("run >= 2 continues from a checkpoint; set init_checkpoint")

    if config.init_checkpoint:
        model, adam, _ = load_model_checkpoint(config.init_checkpoint)
        adam.lr = config.learning_rate
        adam.half_decay = config.half_decay_epochs
    else:
        model = AutoClassifierEncoder(config.model, seed=config.seed)
        adam = Adam(model.params, lr=config.learning_rate, half_decay=config.half_decay_epochs)

    targets_all = _build_targets(config, n, registry)
    hard_by_batch = {i // config.batch_size: i for i in config.hardcoded_indices}
    n_batches = n // config.batch_size
    latent_dim = model.config.latent_dim

    metrics_lines: list[str] = []
    dominant_per_epoch: list[list[int]] = []
    for epoch in range(config.epochs):
        rec_sums = {level: 0.0 for level in loss_mod.LEVELS}
        gen_sums = {level: 0.0 for level in loss_mod.LEVELS}
        weighted_sum = 0.0
        max_weight = -math.inf
        max_weight_index = -1
        dominant: list[int] = []
        for bi in range(n_batches):
            lo = bi * config.batch_size
            hi = lo + config.batch_size
            indices = np.arange(lo, hi)
            images = data.images[lo:hi]
            labels = data.labels[lo:hi]
            hard_global = hard_by_batch.get(bi)
            hard_local = None if hard_global is None else hard_global - lo

            weights, _ = model.observation_weights(images, hard_local, training=True)
            if hard_local is not None:
                dominant_local = hard_local
            else:
                dominant_local = int(np.argmax(weights.data))
            decode_class = int(labels[dominant_local])

            u = {
                level: rng.uniform_matrix(config.seed, epoch, level, indices, latent_dim)
                for level in loss_mod.LEVELS
            }
            batch_targets = {
                level: (targets_all[level][0][lo:hi], targets_all[level][1][lo:hi])
                for level in loss_mod.LEVELS
            }
            total, breakdown = loss_mod.weighted_minibatch_loss(
                model,
                images,
                labels,
                weights,
                batch_targets,
                u,
                decode_class=decode_class,
                training=True,
            )
            value = total.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, bi, value)
            model.zero_grad()
            total.backward()
            adam.step(epoch)

            dominant.append(lo + dominant_local)
            for level in loss_mod.LEVELS:
                rec_sums[level] += float(breakdown.rec_per_level[level].sum())
                gen_sums[level] += float(breakdown.gen_per_level[level].sum())
            weighted_sum += value
            batch_max = float(weights.data.max())
            if batch_max > max_weight:
                max_weight = batch_max
                max_weight_index = lo + int(np.argmax(weights.data))

        metrics_lines.append(
            f"{epoch},{rec_sums[1] / n:.17g},{rec_sums[2] / n:.17g},"
            f"{gen_sums[1] / n:.17g},{gen_sums[2] / n:.17g},"
            f"{weighted_sum / n_batches:.17g},{max_weight_index}"
        )
        dominant_per_epoch.append(dominant)
        if (
            checkpoint_dir is not None
            and config.checkpoint_every
            and (epoch + 1) % config.checkpoint_every == 0
            and epoch + 1 < config.epochs
        ):
            save_model_checkpoint(
                Path(checkpoint_dir) / f"checkpoint_epoch{epoch + 1}.bin",
                model,
                adam,
                meta={"run_number": config.run_number, "epoch": epoch + 1},
            )

    out_registry = extract_drifts(model, data)
    return TrainResult(
        model=model,
        adam=adam,
        registry=out_registry,
        metrics_lines=metrics_lines,
        dominant_indices=dominant_per_epoch,
        config=config,
    )


def write_metrics(lines: list[str], path):
    with open(path, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for line in lines:
            f.write(line + "\n")
