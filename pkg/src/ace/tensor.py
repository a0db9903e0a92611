"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every value participating in differentiation is a :class:`Tensor` holding a
numpy array, an optional gradient accumulator of the same shape, and a
backward closure recorded on a tape.  Calling ``backward()`` on a scalar
result walks the tape in reverse topological order and accumulates exact
analytic gradients into every reachable tensor with ``requires_grad``.

All arithmetic is done in 64-bit floats; forward passes that do not need
gradients should run under :func:`no_grad` so no tape is recorded.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the context (pure-numpy forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- tape --------------------------------------------------------------

    def backward(self):
        """Reverse-accumulate gradients from a scalar result."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def abs(self):
        return absolute(self)

    def max(self):
        return max_reduce(self)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def _tracing(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _accumulate(t: Tensor, grad: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + grad


def _make(out_data, parents, backward) -> Tensor:
    out = Tensor(out_data)
    if _tracing(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise and linear ops ---------------------------------------------


def _broadcast_op(a, b, forward, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = forward(a.data, b.data)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.data.shape} and {b.data.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(da(g, a.data, b.data, out_data), a.data.shape))
        _accumulate(b, _unbroadcast(db(g, a.data, b.data, out_data), b.data.shape))

    return _make(out_data, (a, b), backward)


def add(a, b) -> Tensor:
    return _broadcast_op(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _broadcast_op(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _broadcast_op(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _broadcast_op(
        a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    return _broadcast_op(
        a,
        b,
        np.maximum,
        lambda g, x, y, o: g * (x >= y),
        lambda g, x, y, o: g * (x < y),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul needs [n,k] @ [k,m], got {a.data.shape} and {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.abs(x.data)
    sign = np.sign(x.data)  # subgradient 0 at the kink

    def backward(g):
        _accumulate(x, g * sign)

    return _make(out_data, (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out_data)

    return _make(out_data, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(out_data, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def backward(g):
        _accumulate(x, g * mask)

    return _make(out_data, (x,), backward)


def lncosh(x) -> Tensor:
    """ln(cosh(x)), computed overflow-safely; gradient is tanh(x).

    Uses the identity ln cosh x = |x| + log1p(exp(-2|x|)) - ln 2, which is
    exact for all x and reduces to |x| - ln 2 for |x| > 20.
    """
    x = as_tensor(x)
    ax = np.abs(x.data)
    out_data = ax + np.log1p(np.exp(-2.0 * ax)) - math.log(2.0)
    t = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * t)

    return _make(out_data, (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where unclamped."""
    x = as_tensor(x)
    out_data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _accumulate(x, g * mask)

    return _make(out_data, (x,), backward)


# -- reductions and shape ops -------------------------------------------------


def tensor_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _make(out_data, (x,), backward)


def max_reduce(x) -> Tensor:
    """Maximum over all entries; gradient routes to the first (row-major) argmax."""
    x = as_tensor(x)
    flat_idx = int(np.argmax(x.data))
    out_data = x.data.reshape(-1)[flat_idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx.reshape(-1)[flat_idx] = g
        _accumulate(x, gx)

    return _make(out_data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out_data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _make(out_data, (x,), backward)


def take_rows(x, indices) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out_data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _make(out_data, (x,), backward)


def row_scatter(x, indices, n_rows: int) -> Tensor:
    """Place rows of ``x`` at ``indices`` of an otherwise-zero [n_rows, D] tensor."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out_data = np.zeros((n_rows,) + x.data.shape[1:], dtype=np.float64)
    out_data[idx] = x.data

    def backward(g):
        _accumulate(x, g[idx])

    return _make(out_data, (x,), backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax needs finite inputs")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _make(out_data, (x,), backward)


# -- image ops ----------------------------------------------------------------


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,C,H,W] input with [K,C,kh,kw] kernels."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernels, got {x.data.shape} and {weight.data.shape}")
    b, c, h, w = x.data.shape
    k, ck, kh, kw = weight.data.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape}, kernels {weight.data.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(
            f"geometry not divisible: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B,C,oh,ow,kh,kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    wflat = weight.data.reshape(k, c * kh * kw)
    out_data = (cols @ wflat.T).reshape(b, oh, ow, k).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, k)
        _accumulate(weight, (g2.T @ cols).reshape(k, c, kh, kw))
        if x.requires_grad:
            dcols = (g2 @ wflat).reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += dcols[
                        :, :, :, :, u, v
                    ]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            _accumulate(x, dxp)

    return _make(out_data, (x, weight), backward)


def maxpool2(x) -> Tensor:
    """2x2 max pooling; ties route the gradient to the first entry in row-major order."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 needs [B,C,H,W], got {x.data.shape}")
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    arg = np.argmax(blocks, axis=-1)  # first max wins ties
    out_data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        _accumulate(x, gx)

    return _make(out_data, (x,), backward)


def upsample_repeat2(x) -> Tensor:
    """Replicate each pixel into a 2x2 block; backward sums the four gradients."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_repeat2 needs [B,C,h,w], got {x.data.shape}")
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        b, c, h2, w2 = g.shape
        _accumulate(x, g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Batch normalization over the leading axis of a [B,F] tensor.

    Train mode normalizes by minibatch statistics and (optionally) folds them
    into the running arrays in place: run = momentum * run + (1-momentum) * batch.
    Eval mode normalizes by the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ShapeError(f"batchnorm needs [B,F], got {x.data.shape}")
    n = x.data.shape[0]
    if training:
        if n < 2:
            raise ShapeError(f"batchnorm train mode needs batch >= 2, got {n}")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_running:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * ivar
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        _accumulate(beta, g.sum(axis=0))
        _accumulate(gamma, (g * xhat).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if training:
                _accumulate(
                    x,
                    ivar * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0)),
                )
            else:
                _accumulate(x, gx * ivar)

    return _make(out_data, (x, gamma, beta), backward)


def batchnorm2d(x, gamma, beta, running_mean, running_var, **kw) -> Tensor:
    """Per-channel batch normalization of a [B,C,H,W] map via the [B*H*W, C] core."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d needs [B,C,H,W], got {x.data.shape}")
    b, c, h, w = x.data.shape
    flat = reshape(transpose(x, (0, 2, 3, 1)), (b * h * w, c))
    normed = batchnorm(flat, gamma, beta, running_mean, running_var, **kw)
    return transpose(reshape(normed, (b, h, w, c)), (0, 3, 1, 2))
