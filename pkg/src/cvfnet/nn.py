"""Parameter containers built on :mod:`cvfnet.tensor`."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters and sub-modules as attributes (or lists of them)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        from .errors import CheckpointMismatchError

        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise CheckpointMismatchError(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointMismatchError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key in sorted(value):
            yield from _walk(value[key], f"{name}.{key}")


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / max(fan_in, 1))
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = _he(rng, (cin, cout), cin, dtype)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding=None, dtype=np.float64):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = _he(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class MLP(Module):
    """Stack of fully-connected layers, ReLU after each (PointNet style)."""

    def __init__(self, cin: int, widths: Sequence[int], rng: np.random.Generator, dtype=np.float64):
        if not widths:
            raise ValueError("MLP needs at least one layer")
        dims = [cin, *widths]
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def out_features(self) -> int:
        return self.layers[-1].weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = T.relu(layer(x))
        return x


def zero_parameters(module: Module):
    for p in module.parameters():
        p.data[...] = 0
