"""Layers and parameter bookkeeping on top of the tape engine."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, concat, conv1d, layer_norm, softmax


class Module:
    """Minimal module tree: submodules and Tensor attributes are discovered by name."""

    def parameters(self, prefix=""):
        """Yield (dotted_name, Tensor) for every trainable parameter, sorted by name."""
        for attr, value in sorted(vars(self).items()):
            name = f"{prefix}{attr}" if not prefix else f"{prefix}.{attr}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.parameters(f"{name}.{i}")


class ParamStore:
    """Named parameter map with matching gradient slots."""

    def __init__(self, params=None):
        self._params: dict[str, Tensor] = {}
        if params:
            for name, t in params:
                self.register(name, t)

    @classmethod
    def from_module(cls, module: Module):
        return cls(module.parameters())

    def register(self, name: str, tensor: Tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        self._params[name] = tensor

    def names(self):
        return sorted(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def fill_missing_grads(self):
        """Zero gradient slots for parameters unreachable from the loss."""
        for t in self._params.values():
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)

    def arrays(self):
        return {n: t.data for n, t in self._params.items()}

    def load_arrays(self, arrays):
        if set(arrays) != set(self._params):
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in self._params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype)

    def freeze(self):
        for t in self._params.values():
            t.requires_grad = False


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, bias=True):
        scale = 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.uniform(-scale, scale, size=(d_in, d_out)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[B x I] @ weight[I x O] + bias[O], recorded on the tape."""
    if x.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ValueError(f"linear shape mismatch: x{x.shape} w{weight.shape} b{bias.shape}")
    return x @ weight + bias


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, eps=self._eps)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, dtype=np.float32, stride=1, pad=None):
        scale = 1.0 / np.sqrt(c_in * kernel)
        self.weight = Tensor(rng.uniform(-scale, scale, size=(c_out, c_in, kernel)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.pad = (kernel - 1) // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class SelfAttention(Module):
    """Multi-head scaled dot-product self-attention over B x L x C."""

    def __init__(self, dim, heads, rng, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self.heads = heads
        self.dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        b, l, c = x.shape
        if c != self.dim:
            raise ValueError(f"attention expects channel dim {self.dim}, got {c}")
        h, dh = self.heads, c // self.heads
        qkv = self.qkv(x)  # B x L x 3C
        q = qkv[:, :, 0:c].reshape(b, l, h, dh).transpose(0, 2, 1, 3)
        k = qkv[:, :, c : 2 * c].reshape(b, l, h, dh).transpose(0, 2, 1, 3)
        v = qkv[:, :, 2 * c : 3 * c].reshape(b, l, h, dh).transpose(0, 2, 1, 3)
        att = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, l, c)
        return self.proj(out)


class MLP(Module):
    """Linear stack with layer norm + GELU between hidden layers."""

    def __init__(self, d_in, widths, rng, dtype=np.float32, norm=True):
        dims = [d_in] + list(widths)
        self.layers = [Linear(dims[i], dims[i + 1], rng, dtype) for i in range(len(dims) - 1)]
        self.norms = [LayerNorm(dims[i + 1], dtype) for i in range(len(dims) - 2)] if norm else []

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                if self.norms:
                    x = self.norms[i](x)
                x = x.gelu()
        return x
