"""Dense tensors with reverse-mode automatic differentiation.

Storage is float32 by default; reductions accumulate in float64 before
casting back. A global dtype switch exists so gradient checks can run the
whole graph in float64.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

ArrayLike = Union[float, int, Sequence, np.ndarray, "Tensor"]

_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the storage dtype for newly created tensors."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def current_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops inside produce constant tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-d array participating in a reverse-mode gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph machinery -----------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: Optional[np.ndarray] = None):
        """Accumulate gradients into every reachable tensor with requires_grad."""
        if seed is None:
            if self.size != 1:
                raise DimensionError(
                    f"backward() without a seed requires a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.astype(node.data.dtype).copy()
                else:
                    node.grad = node.grad + g.astype(node.data.dtype)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _needs_grad(t: Tensor) -> bool:
    """True when a backward pass can deposit gradient into this tensor."""
    return t.requires_grad or t._backward is not None


def _wrap(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    """Build an op output; records the graph only when grads can flow."""
    out = Tensor(data)
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = parents
        out._backward = backward
    return out


# -- elementwise -------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _node(data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _node(data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        )

    return _node(data, (a, b), backward)


def texp(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        return ((a, g * data),)

    return _node(data, (a,), backward)


def tlog(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def backward(g):
        return ((a, g / a.data),)

    return _node(data, (a,), backward)


def tsqrt(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    data = np.sqrt(a.data)

    def backward(g):
        return ((a, g * (0.5 / data)),)

    return _node(data, (a,), backward)


def square(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    data = a.data * a.data

    def backward(g):
        return ((a, g * (2.0 * a.data)),)

    return _node(data, (a,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: ArrayLike) -> Tensor:
    """Exact (erf-based) GeLU."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((a, g * (cdf + x * pdf).astype(x.dtype)),)

    return _node(data, (a,), backward)


# -- reductions (float64 accumulation) ---------------------------------------


def tsum(a: ArrayLike, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).astype(a.data.dtype)),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return ((a, np.broadcast_to(gg, a.shape).astype(a.data.dtype)),)

    return _node(data, (a,), backward)


def tmean(a: ArrayLike, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        gg = g / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return ((a, np.broadcast_to(gg, a.shape).astype(a.data.dtype)),)

    return _node(data, (a,), backward)


# -- shape manipulation ------------------------------------------------------


def reshape(a: ArrayLike, shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def backward(g):
        return ((a, g.reshape(a.shape)),)

    return _node(data, (a,), backward)


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = _wrap(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        return ((a, np.transpose(g, inv)),)

    return _node(data, (a,), backward)


def swapaxes(a: ArrayLike, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        return ((a, np.swapaxes(g, ax1, ax2)),)

    return _node(data, (a,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return tuple(out)

    return _node(data, tensors, backward)


def getitem(a: ArrayLike, idx) -> Tensor:
    a = _wrap(a)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return ((a, full),)

    return _node(data, (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        out = []
        if _needs_grad(a):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            out.append((a, _unbroadcast(ga, a.shape)))
        if _needs_grad(b):
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            out.append((b, _unbroadcast(gb, b.shape)))
        return tuple(out)

    return _node(data, (a, b), backward)


# -- composite neural ops ----------------------------------------------------


def softmax_rows(x: ArrayLike) -> Tensor:
    """Softmax over the last dimension, stabilized by row-max subtraction."""
    x = _wrap(x)
    shift = x.data.max(axis=-1, keepdims=True)
    e = np.exp((x.data - shift).astype(np.float64))
    out = (e / e.sum(axis=-1, keepdims=True)).astype(x.data.dtype)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
        return ((x, out * (g - dot)),)

    return _node(out, (x,), backward)


def layer_norm(a: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-6) -> Tensor:
    """Per-vector normalization over the last dim, then affine transform.

    Uses population (biased) variance.
    """
    a, gamma, beta = _wrap(a), _wrap(gamma), _wrap(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match last dim {d}"
        )
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (gamma.data * xhat + beta.data).astype(a.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        gxhat = g64 * gamma.data
        dx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(a.ndim - 1))
        ggamma = (g64 * xhat).sum(axis=red)
        gbeta = g64.sum(axis=red)
        return (
            (a, dx.astype(a.data.dtype)),
            (gamma, ggamma.astype(a.data.dtype)),
            (beta, gbeta.astype(a.data.dtype)),
        )

    return _node(out, (a, gamma, beta), backward)


def cross_entropy(logits: ArrayLike, labels) -> Tensor:
    """Mean of -log softmax(logits)[label]; accepts one vector or a batch."""
    logits = _wrap(logits)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    x = logits if logits.ndim == 2 else reshape(logits, (1, -1))
    n, c = x.shape
    if lab.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but {lab.shape} labels")
    if lab.min() < 0 or lab.max() >= c:
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    p = softmax_rows(x)
    picked = getitem(p, (np.arange(n), lab))
    return mul(tmean(tlog(picked)), -1.0)


__all__ = [
    "Tensor",
    "DimensionError",
    "no_grad",
    "grad_enabled",
    "use_dtype",
    "current_dtype",
    "add",
    "mul",
    "div",
    "texp",
    "tlog",
    "tsqrt",
    "square",
    "gelu",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "swapaxes",
    "concat",
    "getitem",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "cross_entropy",
]
