"""Network definition: per-level encoders, class-dependent samplers and
decoders, and the convolutional observation-weight classifier.

Pyramid level 1 is the full-resolution residual band, level 2 the coarse
band.  Each level runs an encoder ladder

    hidden = batchnorm(lncosh(affine(band)))

followed by per-class linear heads producing the latent location mu and
log-sigma (no nonlinearity on either head; log-sigma is clamped for numeric
safety and exponentiated).  Each class owns a decoder ladder

    band_hat = affine(batchnorm(tanh(affine(z))))

whose final layer is affine so residual bands in [-1, 0] stay reachable.

The weight classifier is a 3-64-64-128 convolution ladder (3x3 kernels,
batch norm, ReLU, 2x2 max pooling) with a fully-connected last layer giving
one logit per image.  Logits are clamped to a window of width ln(ratio cap)
below their maximum before softmax, so minibatch weights B * softmax(logits)
sum to B with a bounded max/min ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class LevelSpec:
    input_dim: int
    hidden_dim: int
    latent_dim: int = 2
    num_classes: int = 10


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    hidden_residual: int = 16
    hidden_coarse: int = 4
    latent_dim: int = 2
    num_classes: int = 10
    classifier_channels: tuple[int, ...] = (64, 64, 128)
    logsigma_limit: float = 10.0
    weight_ratio_cap: float = 1.0e6
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8 (pyramid + classifier pooling)")

    @classmethod
    def toy(cls, num_classes: int = 2) -> "ModelConfig":
        """Small 8x8 instantiation for finite-difference and unit tests."""
        return cls(
            image_size=8,
            hidden_residual=4,
            hidden_coarse=2,
            num_classes=num_classes,
            classifier_channels=(4, 4, 8),
        )

    def band_dim(self, level: int) -> int:
        if level == 1:
            return self.channels * self.image_size * self.image_size
        if level == 2:
            return self.channels * (self.image_size // 2) * (self.image_size // 2)
        raise ValueError(f"level must be 1 or 2, got {level}")

    def hidden_dim(self, level: int) -> int:
        return {1: self.hidden_residual, 2: self.hidden_coarse}[level]

    def level_spec(self, level: int) -> LevelSpec:
        return LevelSpec(self.band_dim(level), self.hidden_dim(level), self.latent_dim, self.num_classes)

    def classifier_fc_dim(self) -> int:
        side = self.image_size // 8  # three 2x2 poolings
        return self.classifier_channels[-1] * side * side

    def meta_arrays(self) -> dict[str, np.ndarray]:
        return {
            "image_size": np.float64(self.image_size),
            "channels": np.float64(self.channels),
            "hidden_residual": np.float64(self.hidden_residual),
            "hidden_coarse": np.float64(self.hidden_coarse),
            "latent_dim": np.float64(self.latent_dim),
            "num_classes": np.float64(self.num_classes),
            "classifier_channels": np.asarray(self.classifier_channels, dtype=np.float64),
            "logsigma_limit": np.float64(self.logsigma_limit),
            "weight_ratio_cap": np.float64(self.weight_ratio_cap),
            "bn_momentum": np.float64(self.bn_momentum),
            "bn_eps": np.float64(self.bn_eps),
        }

    @classmethod
    def from_meta(cls, meta: dict[str, np.ndarray]) -> "ModelConfig":
        return cls(
            image_size=int(meta["image_size"]),
            channels=int(meta["channels"]),
            hidden_residual=int(meta["hidden_residual"]),
            hidden_coarse=int(meta["hidden_coarse"]),
            latent_dim=int(meta["latent_dim"]),
            num_classes=int(meta["num_classes"]),
            classifier_channels=tuple(int(c) for c in np.atleast_1d(meta["classifier_channels"])),
            logsigma_limit=float(meta["logsigma_limit"]),
            weight_ratio_cap=float(meta["weight_ratio_cap"]),
            bn_momentum=float(meta["bn_momentum"]),
            bn_eps=float(meta["bn_eps"]),
        )


def expected_parameter_count(config: ModelConfig) -> int:
    """Trainable-value count implied by the layer-size ladders.

    Each affine map D_in -> D_out contributes D_in*D_out + D_out values, each
    batch norm 2 per normalized feature.  Computed independently of the
    parameter store so tests can assert the realized total against it.
    """
    total = 0
    for level in (1, 2):
        d = config.band_dim(level)
        h = config.hidden_dim(level)
        ld = config.latent_dim
        c = config.num_classes
        total += d * h + h + 2 * h  # encoder affine + batch norm
        total += c * 2 * (h * ld + ld)  # mu and log-sigma heads
        total += c * (ld * h + h + 2 * h + h * d + d)  # decoder ladder + batch norm
    c_in = config.channels
    for c_out in config.classifier_channels:
        total += c_in * c_out * 9 + c_out + 2 * c_out  # 3x3 conv + bias + batch norm
        c_in = c_out
    total += config.classifier_fc_dim() * 1 + 1
    return total


class AutoClassifierEncoder:
    """Parameter store plus the forward passes of every sub-network."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, T.Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        # Window backed off a hair below ln(cap) so the realized max/min
        # weight ratio stays <= cap under floating-point rounding.
        self._logit_window = math.log(config.weight_ratio_cap) - 1e-12
        self._init_params(seed)

    # -- construction ---------------------------------------------------------

    def _add_param(self, name: str, values: np.ndarray):
        self.params[name] = T.Tensor(values, requires_grad=True, name=name)

    def _add_affine(self, rng, name: str, d_in: int, d_out: int, init: str):
        if init == "normal":
            w = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out))
        else:
            bound = 1.0 / math.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self._add_param(f"{name}.W", w)
        self._add_param(f"{name}.b", np.zeros(d_out))

    def _add_batchnorm(self, name: str, dim: int):
        self._add_param(f"{name}.gamma", np.ones(dim))
        self._add_param(f"{name}.beta", np.zeros(dim))
        self.buffers[f"{name}.running_mean"] = np.zeros(dim)
        self.buffers[f"{name}.running_var"] = np.ones(dim)

    def _init_params(self, seed: int):
        rng = np.random.Generator(np.random.PCG64(seed))
        cfg = self.config
        for level in (1, 2):
            spec = cfg.level_spec(level)
            enc = f"level{level}.encoder"
            self._add_affine(rng, enc, spec.input_dim, spec.hidden_dim, "normal")
            self._add_batchnorm(enc, spec.hidden_dim)
            for k in range(spec.num_classes):
                self._add_affine(rng, f"level{level}.mu.class{k}", spec.hidden_dim, spec.latent_dim, "normal")
            for k in range(spec.num_classes):
                self._add_affine(
                    rng, f"level{level}.logsigma.class{k}", spec.hidden_dim, spec.latent_dim, "normal"
                )
            for k in range(spec.num_classes):
                dec = f"level{level}.decoder.class{k}"
                self._add_affine(rng, f"{dec}.hidden", spec.latent_dim, spec.hidden_dim, "normal")
                self._add_batchnorm(dec, spec.hidden_dim)
                self._add_affine(rng, f"{dec}.out", spec.hidden_dim, spec.input_dim, "normal")
        c_in = cfg.channels
        for i, c_out in enumerate(cfg.classifier_channels, start=1):
            fan_in = c_in * 9
            bound = 1.0 / math.sqrt(fan_in)
            self._add_param(f"clf.layer{i}.W", rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)))
            self._add_param(f"clf.layer{i}.b", np.zeros(c_out))
            self._add_batchnorm(f"clf.layer{i}", c_out)
            c_in = c_out
        self._add_affine(rng, "clf.fc", cfg.classifier_fc_dim(), 1, "uniform")

    # -- forward passes -------------------------------------------------------

    def _bn(self, x, name: str, *, training: bool, update_running: bool, conv: bool):
        fn = T.batchnorm2d if conv else T.batchnorm
        return fn(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training=training,
            momentum=self.config.bn_momentum,
            eps=self.config.bn_eps,
            update_running=update_running,
        )

    def encode(self, band, level: int, *, training: bool, update_running: bool = True) -> T.Tensor:
        """Level band [B, D] -> hidden [B, H]."""
        x = T.as_tensor(band)
        spec = self.config.level_spec(level)
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise T.ShapeError(f"level {level} encoder expects [B,{spec.input_dim}], got {x.shape}")
        enc = f"level{level}.encoder"
        pre = T.matmul(x, self.params[f"{enc}.W"]) + self.params[f"{enc}.b"]
        return self._bn(T.lncosh(pre), enc, training=training, update_running=update_running, conv=False)

    def posterior(self, hidden: T.Tensor, labels, level: int) -> tuple[T.Tensor, T.Tensor]:
        """Per-observation (mu, sigma) from each observation's own class heads."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= self.config.num_classes:
            raise ValueError(f"class labels must lie in [0, {self.config.num_classes}), got {labels}")
        n = hidden.shape[0]
        mu = None
        logsig = None
        for k in np.unique(labels):
            idx = np.flatnonzero(labels == k)
            hk = T.take_rows(hidden, idx)
            mu_k = T.matmul(hk, self.params[f"level{level}.mu.class{k}.W"]) + self.params[
                f"level{level}.mu.class{k}.b"
            ]
            ls_k = T.matmul(hk, self.params[f"level{level}.logsigma.class{k}.W"]) + self.params[
                f"level{level}.logsigma.class{k}.b"
            ]
            mu_piece = T.row_scatter(mu_k, idx, n)
            ls_piece = T.row_scatter(ls_k, idx, n)
            mu = mu_piece if mu is None else mu + mu_piece
            logsig = ls_piece if logsig is None else logsig + ls_piece
        limit = self.config.logsigma_limit
        sigma = T.exp(T.clip(logsig, -limit, limit))
        return mu, sigma

    def decode(self, z, class_label: int, level: int, *, training: bool, update_running: bool = True) -> T.Tensor:
        """Latent [B, latent_dim] -> reconstructed band [B, D] via one class's ladder."""
        if not 0 <= class_label < self.config.num_classes:
            raise ValueError(f"class label {class_label} out of range [0, {self.config.num_classes})")
        z = T.as_tensor(z)
        dec = f"level{level}.decoder.class{class_label}"
        h = T.matmul(z, self.params[f"{dec}.hidden.W"]) + self.params[f"{dec}.hidden.b"]
        h = self._bn(T.tanh(h), dec, training=training, update_running=update_running, conv=False)
        return T.matmul(h, self.params[f"{dec}.out.W"]) + self.params[f"{dec}.out.b"]

    def classifier_logits(self, images, *, training: bool, update_running: bool = True) -> T.Tensor:
        """[B,C,H,W] images -> one logit per image."""
        x = T.as_tensor(images)
        n = x.shape[0]
        for i, c_out in enumerate(self.config.classifier_channels, start=1):
            x = T.conv2d(x, self.params[f"clf.layer{i}.W"], stride=1, padding=1)
            x = x + T.reshape(self.params[f"clf.layer{i}.b"], (1, c_out, 1, 1))
            x = self._bn(x, f"clf.layer{i}", training=training, update_running=update_running, conv=True)
            x = T.maxpool2(T.relu(x))
        flat = T.reshape(x, (n, self.config.classifier_fc_dim()))
        logits = T.matmul(flat, self.params["clf.fc.W"]) + self.params["clf.fc.b"]
        return T.reshape(logits, (n,))

    def weights_from_logits(self, logits: T.Tensor, hardcoded_index: int | None = None) -> T.Tensor:
        """Minibatch weights W = B * softmax(window-clamped logits).

        Logits are clamped to [max - ln(ratio cap), max]; a hard-coded
        observation's logit is overridden to the window maximum so it always
        attains the largest weight.
        """
        n = logits.shape[0]
        if hardcoded_index is not None and not 0 <= hardcoded_index < n:
            raise IndexError(f"hardcoded index {hardcoded_index} outside minibatch of {n}")
        top = T.max_reduce(logits)
        clamped = T.maximum(logits, top - self._logit_window)
        if hardcoded_index is not None:
            mask = np.zeros(n)
            mask[hardcoded_index] = 1.0
            clamped = clamped * T.constant(1.0 - mask) + top * T.constant(mask)
        return T.softmax(clamped) * float(n)

    def observation_weights(
        self, images, hardcoded_index: int | None = None, *, training: bool, update_running: bool = True
    ) -> tuple[T.Tensor, T.Tensor]:
        """(weights, raw logits) for a minibatch of at least 2 images."""
        logits = self.classifier_logits(images, training=training, update_running=update_running)
        return self.weights_from_logits(logits, hardcoded_index), logits

    # -- state ----------------------------------------------------------------

    def named_parameters(self) -> dict[str, T.Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            values = np.asarray(arrays[name], dtype=np.float64)
            if values.shape != p.data.shape:
                raise T.ShapeError(f"parameter {name!r}: expected {p.data.shape}, got {values.shape}")
            p.data = values.copy()
        for name in self.buffers:
            if name not in arrays:
                raise KeyError(f"checkpoint missing buffer {name!r}")
            values = np.asarray(arrays[name], dtype=np.float64)
            if values.shape != self.buffers[name].shape:
                raise T.ShapeError(f"buffer {name!r}: expected {self.buffers[name].shape}, got {values.shape}")
            self.buffers[name][...] = values
