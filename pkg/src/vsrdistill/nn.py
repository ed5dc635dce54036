"""Module and parameter containers on top of :mod:`vsrdistill.tensor`."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class; parameters and submodules are discovered from attributes."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing: {missing}, unexpected: {unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=T.DEFAULT_DTYPE) -> Parameter:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-limit, limit, size=shape).astype(dtype), dtype=dtype)


def zeros(shape, dtype=T.DEFAULT_DTYPE) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype), dtype=dtype)


def ones(shape, dtype=T.DEFAULT_DTYPE) -> Parameter:
    return Parameter(np.ones(shape, dtype=dtype), dtype=dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = xavier(rng, (d_in, d_out), d_in, d_out)
        self.bias = zeros((d_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = ones((d,))
        self.beta = zeros((d,))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1, padding=0):
        k = T._tuplify(kernel, 2)
        fan = c_in * k[0] * k[1]
        self.weight = xavier(rng, (c_out, c_in) + k, fan, c_out * k[0] * k[1])
        self.bias = zeros((c_out,))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1, padding=0):
        k = T._tuplify(kernel, 3)
        fan = c_in * int(np.prod(k))
        self.weight = xavier(rng, (c_out, c_in) + k, fan, c_out * int(np.prod(k)))
        self.bias = zeros((c_out,))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Dropout(Module):
    def __init__(self, p: float, rng: Optional[np.random.Generator]):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.rng, self.training)
