"""Reverse-mode automatic differentiation over dense numpy arrays.

Tape-style graphs rebuilt per step: every operation whose inputs require
gradients records its parents and a backward closure. Node ids grow
monotonically in creation order, so walking the reachable set by descending
id is exactly reverse topological order and visits each node once. Results
that depend on no gradient-requiring input record nothing, which makes
teacher/no-grad forward passes free of graph bookkeeping.

float32 is the working precision; the verification tests build float64
graphs (central finite differences need the headroom). Ops inherit the
dtype of their inputs.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_node_counter = itertools.count()

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A shaped float array, optionally a node of the current graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = "param" if self._backward is None and self.requires_grad else "node"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    # ------------------------------------------------------------------
    def backward(self, seed=None) -> None:
        """Accumulate gradients of this (scalar) tensor into the graph leaves."""
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit seed needs a scalar")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype).reshape(self.data.shape)

        # Reachable gradient-requiring nodes; parents always have smaller ids,
        # so descending-id order is reverse topological order.
        seen = {self.node_id: self}
        stack = [self]
        while stack:
            node = stack.pop()
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in seen:
                    seen[parent.node_id] = parent
                    stack.append(parent)

        if self.grad is None:
            self.grad = seed.copy()
        else:
            self.grad = self.grad + seed

        for node in sorted(seen.values(), key=lambda n: n.node_id, reverse=True):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # fresh arrays are adopted; views or the node's own grad
                    # (returned unchanged by no-op backwards) must be copied
                    # because later accumulation happens in place
                    if g.base is not None or g is node.grad:
                        g = np.array(g)
                    parent.grad = g
                else:
                    parent.grad += g


# ----------------------------------------------------------------------
# construction helpers

def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_counter)
    for p in parents:
        if p.requires_grad:
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            return out
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise and linear-algebra ops

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def backward(g):
        return (g * s,)

    return _result(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked on matching leading axes, or 2-d rhs weight."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {ad.shape} x {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(
            f"matmul leading dimensions must match (or rhs be 2-d): {ad.shape} x {bd.shape}")
    data = ad @ bd

    def backward(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with a 2-d weight, fused into one node."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear shape mismatch: {xd.shape} x {wd.shape}")
    data = xd @ wd
    if b is not None:
        data = data + b.data

    if b is None:
        def backward(g):
            return (g @ wd.T,
                    xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        return _result(data, (x, w), backward)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g @ wd.T,
                xd.reshape(-1, xd.shape[-1]).T @ g2,
                g2.sum(axis=0))

    return _result(data, (x, w, b), backward)


# ----------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    src_shape = a.data.shape

    def backward(g):
        return (g.reshape(src_shape),)

    return _result(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _result(data, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    cuts = np.cumsum(sizes[:-1])

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(data, tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _result(data, (a,), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(data, (a,), backward)


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Tile a [d] (or [1, d]) vector into [n, d]."""
    vec = a.data.reshape(-1)
    data = np.broadcast_to(vec, (n, vec.shape[0])).copy()
    src_shape = a.data.shape

    def backward(g):
        return (g.sum(axis=0).reshape(src_shape),)

    return _result(data, (a,), backward)


# ----------------------------------------------------------------------
# nonlinearities and normalization

def gelu(x: Tensor) -> Tensor:
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    t = np.tanh(u)
    data = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        dt = (1.0 - t * t) * du
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result(data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ValueError(f"softmax axis {axis} out of range for ndim {xd.ndim}")
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        s = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - s),)

    return _result(data, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        red = tuple(range(g.ndim - gain.data.ndim))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(data, (x, gain, bias), backward)


def absolute(x: Tensor) -> Tensor:
    data = np.abs(x.data)
    sgn = np.sign(x.data)

    def backward(g):
        return (g * sgn,)

    return _result(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _result(data, (x,), backward)


# ----------------------------------------------------------------------
# reductions and losses

def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())
    shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(data, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean())
    shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(data, (x,), backward)


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(data, (x,), backward)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.data.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(data, (x,), backward)


def mean_l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of |a - b|."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mean_l1 shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.asarray(np.abs(diff).mean())
    sgn = np.sign(diff)

    def backward(g):
        ga = sgn * (g / n)
        return ga, -ga

    return _result(data, (a, b), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over rows; labels are integer class ids."""
    ld = logits.data
    labels = np.asarray(labels, dtype=np.intp)
    if ld.ndim != 2 or labels.shape != (ld.shape[0],):
        raise ValueError(f"cross_entropy expects [n, classes] logits, got {ld.shape}")
    m = ld.max(axis=-1, keepdims=True)
    e = np.exp(ld - m)
    p = e / e.sum(axis=-1, keepdims=True)
    n = ld.shape[0]
    picked = np.maximum(p[np.arange(n), labels], np.finfo(ld.dtype).tiny)
    data = np.asarray(-np.log(picked).mean())

    def backward(g):
        gp = p.copy()
        gp[np.arange(n), labels] -= 1.0
        return (gp * (g / n),)

    return _result(data, (logits,), backward)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs of the last axis: y = x*cos + rot(x)*sin.

    cos/sin are constants (pair-repeated along the last axis) broadcastable
    to x; rot maps pairs (x0, x1) -> (-x1, x0), so each pair's norm is
    preserved.
    """
    xd = x.data
    rot = np.empty_like(xd)
    rot[..., 0::2] = -xd[..., 1::2]
    rot[..., 1::2] = xd[..., 0::2]
    data = xd * cos + rot * sin

    def backward(g):
        gs = g * sin
        inv = np.empty_like(gs)
        inv[..., 0::2] = gs[..., 1::2]
        inv[..., 1::2] = -gs[..., 0::2]
        return (_unbroadcast(g * cos + inv, xd.shape),)

    return _result(data, (x,), backward)
