"""Parameter containers: a tiny module system on top of numkernel."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor


class Module:
    """Attribute-registered parameters and submodules, named by path."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, dtype=np.float64, zero_init: bool = False):
        std = 0.0 if zero_init else 1.0 / np.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero_init else rng.normal(0.0, std, (n_in, n_out))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(n_out), dtype)

    def __call__(self, x):
        return nk.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64):
        self.gamma = param(np.ones(dim), dtype)
        self.beta = param(np.zeros(dim), dtype)

    def __call__(self, x):
        return nk.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng, dtype=np.float64):
        self.fc1 = Linear(n_in, hidden, rng, dtype)
        self.fc2 = Linear(hidden, n_out, rng, dtype)

    def __call__(self, x):
        return self.fc2(nk.gelu(self.fc1(x)))
