"""Tape-based reverse-mode autodiff over numpy arrays.

The graph is rebuilt on every forward pass: each op records its parents and a
closure that accumulates gradients into them. ``backward()`` runs a topological
sweep from a scalar loss. Small by design; only the ops the networks need.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

# When True, every op output is checked for NaN/Inf and raises immediately.
# Training/sampling drivers check at step granularity instead (cheaper).
STRICT_FINITE = False

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(FloatingPointError):
    """A forward pass or loss produced NaN/Inf."""


def _check(arr, what="tensor"):
    if STRICT_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def assert_finite(arr, what="tensor"):
    if not np.all(np.isfinite(np.asarray(arr))):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        _check(data)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        needs = any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    # -- autodiff -------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no graph")
        # iterative topo sort (graphs can be deep at large T)
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._parents = ()
                node._backward = None

    # -- elementwise ----------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        a, b = self, other
        data = a.data + b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._result(-a.data, (a,), backward)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(np.asarray(other, dtype=self.dtype)) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        a, b = self, other
        data = a.data * b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        a, b = self, other
        data = a.data / b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(data, (a, b), backward)

    def __pow__(self, p):
        a = self
        data = a.data ** p

        def backward(g):
            a._accumulate(g * p * a.data ** (p - 1))

        return Tensor._result(data, (a,), backward)

    def exp(self):
        a = self
        data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * data)

        return Tensor._result(data, (a,), backward)

    def log(self):
        a = self
        data = np.log(a.data)

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._result(data, (a,), backward)

    def sqrt(self):
        a = self
        data = np.sqrt(a.data)

        def backward(g):
            a._accumulate(g * 0.5 / data)

        return Tensor._result(data, (a,), backward)

    def tanh(self):
        a = self
        data = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - data * data))

        return Tensor._result(data, (a,), backward)

    def abs(self):
        a = self
        data = np.abs(a.data)

        def backward(g):
            a._accumulate(g * np.sign(a.data))

        return Tensor._result(data, (a,), backward)

    def gelu(self):
        a = self
        x = a.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        data = (x * cdf).astype(x.dtype)

        def backward(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            a._accumulate(g * (cdf + x * pdf).astype(x.dtype))

        return Tensor._result(data, (a,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

        return Tensor._result(np.asarray(data), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def backward(g):
            a._accumulate(g.reshape(old))

        return Tensor._result(a.data.reshape(shape), (a,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)

        def backward(g):
            a._accumulate(g.transpose(inv))

        return Tensor._result(a.data.transpose(axes), (a,), backward)

    def __getitem__(self, idx):
        a = self
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (slice, int)) or p is None or p is Ellipsis for p in parts)

        def backward(g):
            full = np.zeros_like(a.data)
            if basic:  # basic slices never alias, so += is safe and fast
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._result(a.data[idx], (a,), backward)

    # -- linear algebra -------------------------------------------------------

    def __matmul__(self, other):
        a, b = self, other
        data = np.matmul(a.data, b.data)

        def backward(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                if a.data.ndim == 1:
                    gb = np.outer(a.data, g) if g.ndim == 1 else np.matmul(a.data[:, None], g[None])
                else:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._result(data, (a, b), backward)


# -- free-function ops --------------------------------------------------------


def concat(tensors, axis=-1):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._result(data, tuple(tensors), backward)


def softmax(x, axis=-1):
    """Max-shifted softmax; rows sum to 1."""
    a = x
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - inner))

    return Tensor._result(data, (a,), backward)


def repeat2(x, axis=-1):
    """Duplicate every entry along `axis` (nearest-neighbor 2x upsampling)."""
    a = x
    data = np.repeat(a.data, 2, axis=axis)

    def backward(g):
        ax = axis % g.ndim
        shape = list(g.shape)
        shape[ax] //= 2
        shape.insert(ax + 1, 2)
        a._accumulate(g.reshape(shape).sum(axis=ax + 1))

    return Tensor._result(data, (a,), backward)


def conv1d(x, w, b=None, stride=1, pad=0):
    """1-D convolution. x: B x Cin x L, w: Cout x Cin x k, b: Cout."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d channel mismatch: input {x.shape} vs weight {w.shape}")
    k = w.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    data = np.einsum("bclk,ock->bol", win, w.data, optimize=True)
    if b is not None:
        data = data + b.data[None, :, None]
    data = np.ascontiguousarray(data, dtype=x.dtype)
    l_out = data.shape[2]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.einsum("bol,bclk->ock", g, win, optimize=True).astype(w.dtype))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2)).astype(b.dtype))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for kk in range(k):
                gxp[:, :, kk : kk + stride * l_out : stride] += np.einsum(
                    "bol,oc->bcl", g, w.data[:, :, kk], optimize=True
                )
            x._accumulate(gxp[:, :, pad : gxp.shape[2] - pad] if pad else gxp)

    return Tensor._result(data, parents, backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale/shift. Built from primitives."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gain + bias
