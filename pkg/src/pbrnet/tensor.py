"""Dense float tensors with reverse-mode automatic differentiation.

Covers exactly the operations the detector needs: dense convolutions,
fully-connected layers, softmax/relu, reductions, smooth-L1 and
cross-entropy losses, plus SGD with momentum. Forward and backward run in
the dtype of the inputs; float32 is the training default and float64 the
"shadow" mode used by gradient-check tests.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "SGD",
    "ShapeError",
    "no_grad",
    "add",
    "mul",
    "relu",
    "softmax",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "take_per_row",
    "linear",
    "conv2d",
    "conv1d",
    "upsample2_nearest",
    "smooth_l1",
    "cross_entropy",
]

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array, optionally tracked for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division only supports scalar divisors")
        return mul(self, 1.0 / float(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def backward(self):
        """Backpropagate from a scalar, accumulating into `.grad` fields."""
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
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


class Parameter(Tensor):
    """Named trainable tensor with an SGD momentum buffer."""

    __slots__ = ("name", "momentum")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum = np.zeros_like(self.data)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, inputs: Iterable[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = tuple(t for t in inputs if t.requires_grad)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    # Grad arrays are never mutated in place, so storing a view is safe.
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    return _result(data, (x,), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(x, data * (g - inner))

    return _result(data, (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return _result(np.asarray(data), (x,), backward)


def mean(x: Tensor) -> Tensor:
    scale = 1.0 / x.size
    data = np.asarray(x.data.mean())

    def backward(g):
        _accum(x, np.broadcast_to(g * scale, x.shape).astype(x.dtype, copy=False))

    return _result(data, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _result(data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inverse))

    return _result(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _result(data, tuple(tensors), backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0."""
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _result(data, (x,), backward)


def take_per_row(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row selection along axis 1: out[i] = x[i, idx[i], ...]."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"index shape {idx.shape} does not match leading dim of {x.shape}")
    rows = np.arange(x.shape[0])
    data = x.data[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        _accum(x, gx)

    return _result(data, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully-connected layer: x (N,K) @ w (K,M) + b (M,)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear mismatch: input {x.shape} vs weight {w.shape}")
    data = x.data @ w.data
    if b is not None:
        data = data + b.data

    def backward(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(data, parents, backward)


def _conv_spatial(xd, wd, stride, pad, groups):
    n, c, h, w_in = xd.shape
    o, cg, kh, kw = wd.shape
    if c != cg * groups or o % groups:
        raise ShapeError(f"conv channel mismatch: input {xd.shape} vs kernel {wd.shape} (groups={groups})")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w_in + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output empty: input {xd.shape}, kernel {wd.shape}, stride {stride}, pad {pad}")
    return xp, ho, wo


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-d convolution on (N,C,H,W) with an (O,C/groups,kh,kw) kernel.

    Implemented as a loop over kernel offsets with one dense contraction
    per offset; exact, deterministic, and fast enough at this scale.
    """
    xd, wd = x.data, w.data
    xp, ho, wo = _conv_spatial(xd, wd, stride, pad, groups)
    n = xd.shape[0]
    o, cg, kh, kw = wd.shape
    og = o // groups
    out = np.zeros((n, o, ho, wo), dtype=xd.dtype)
    for gi in range(groups):
        xg = xp[:, gi * cg:(gi + 1) * cg]
        wg = wd[gi * og:(gi + 1) * og]
        acc = out[:, gi * og:(gi + 1) * og]
        for dy in range(kh):
            for dx in range(kw):
                xs = xg[:, :, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride]
                acc += np.tensordot(wg[:, :, dy, dx], xs, axes=([1], [1])).transpose(1, 0, 2, 3)
    if b is not None:
        out += b.data.reshape(1, o, 1, 1)

    def backward(g):
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for gi in range(groups):
            xg = xp[:, gi * cg:(gi + 1) * cg]
            wg = wd[gi * og:(gi + 1) * og]
            gg = g[:, gi * og:(gi + 1) * og]
            gxg = gxp[:, gi * cg:(gi + 1) * cg]
            for dy in range(kh):
                for dx in range(kw):
                    xs = xg[:, :, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride]
                    gw[gi * og:(gi + 1) * og, :, dy, dx] = np.tensordot(gg, xs, axes=([0, 2, 3], [0, 2, 3]))
                    gxg[:, :, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride] += (
                        np.tensordot(wg[:, :, dy, dx], gg, axes=([0], [1])).transpose(1, 0, 2, 3)
                    )
        gx = gxp[:, :, pad:pad + xd.shape[2], pad:pad + xd.shape[3]] if pad else gxp
        _accum(x, gx)
        _accum(w, gw)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int = 1) -> Tensor:
    """1-d convolution on (N,C,L) with an (O,C,k) kernel, stride 1."""
    xd, wd = x.data, w.data
    n, c, length = xd.shape
    o, ci, k = wd.shape
    if c != ci:
        raise ShapeError(f"conv1d channel mismatch: input {xd.shape} vs kernel {wd.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    lo = length + 2 * pad - k + 1
    out = np.zeros((n, o, lo), dtype=xd.dtype)
    for dk in range(k):
        out += np.tensordot(wd[:, :, dk], xp[:, :, dk:dk + lo], axes=([1], [1])).transpose(1, 0, 2)
    if b is not None:
        out += b.data.reshape(1, o, 1)

    def backward(g):
        if b is not None:
            _accum(b, g.sum(axis=(0, 2)))
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for dk in range(k):
            xs = xp[:, :, dk:dk + lo]
            gw[:, :, dk] = np.tensordot(g, xs, axes=([0, 2], [0, 2]))
            gxp[:, :, dk:dk + lo] += np.tensordot(wd[:, :, dk], g, axes=([0], [1])).transpose(1, 0, 2)
        gx = gxp[:, :, pad:pad + length] if pad else gxp
        _accum(x, gx)
        _accum(w, gw)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def upsample2_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of (N,C,H,W)."""
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h2, w2 = g.shape
        _accum(x, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _result(data, (x,), backward)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5*x^2/beta for |x|<beta, else |x|-0.5*beta."""
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    ax = np.abs(x.data)
    data = np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta).astype(x.dtype, copy=False)

    def backward(g):
        _accum(x, g * np.clip(x.data / beta, -1.0, 1.0))

    return _result(data, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (N,C) logits and (N,) labels, got {logits.shape} and {labels.shape}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    prob = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    nll = -(np.log(prob[rows, labels]))
    data = np.asarray(nll.mean(), dtype=z.dtype)

    def backward(g):
        gz = prob.copy()
        gz[rows, labels] -= 1.0
        _accum(logits, g * gz / z.shape[0])

    return _result(data, (logits,), backward)


class SGD:
    """SGD with momentum and decoupled-from-nothing weight decay:
    v <- m*v + g + wd*w; w <- w - lr*v. Gradients are cleared by step().
    """

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name!r} has no gradient; run backward first")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.momentum = self.momentum * p.momentum + g
            p.data = p.data - self.lr * p.momentum
            p.grad = None
