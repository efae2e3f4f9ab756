"""Parameter-holding layers on top of the diffcore primitives."""

from __future__ import annotations

import numpy as np

from ..diffcore import Tensor, ops


class Module:
    """Minimal parameter container with deterministic registration order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, mod in enumerate(self._items):
            setattr(self, str(i), mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def xavier_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel=3, stride=1, padding=None, bias_init=0.0):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = kernel * kernel * c_in
        self.w = Tensor(kaiming_uniform(rng, (kernel, kernel, c_in, c_out), fan_in),
                        requires_grad=True)
        self.b = Tensor(np.full(c_out, bias_init, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ops.add(ops.conv2d(x, self.w, self.stride, self.padding), self.b)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            w = xavier_uniform(rng, (d_in, d_out), d_in, d_out)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ops.add(ops.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        normed = ops.layer_norm(x, axis=-1, eps=self.eps)
        return ops.add(ops.mul(normed, self.gamma), self.beta)
