"""Adam optimizer with an epoch-indexed half-decay learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(RuntimeError):
    """A parameter's gradient contained NaN or infinity; the step was rejected."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter {param_name!r}")
        self.param_name = param_name


class Adam:
    """Standard Adam with bias correction.

    The effective rate at integer ``epoch`` is lr * 2**(-epoch / half_decay):
    the base rate halves every ``half_decay`` epochs.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        half_decay: float = 100.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.half_decay = half_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def rate(self, epoch: float) -> float:
        return self.lr * 2.0 ** (-epoch / self.half_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, epoch: float):
        """Apply one update in place; gradients of None count as zero."""
        self.t += 1
        eta = self.rate(epoch)
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = 0.0
            elif not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data -= eta * (m / c1) / (np.sqrt(v / c2) + self.eps)

    # -- checkpoint plumbing -------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        out["adam.t"] = np.float64(self.t)
        out["adam.lr"] = np.float64(self.lr)
        out["adam.half_decay"] = np.float64(self.half_decay)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"adam.v.{name}"], dtype=np.float64)
        self.t = int(arrays["adam.t"])
        self.lr = float(arrays["adam.lr"])
        self.half_decay = float(arrays["adam.half_decay"])
