"""Parameter container and the three layer types the denoisers are built from."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Parameter(Tensor):
    def __init__(self, data: np.ndarray):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Plain attribute-walking container; no registration ceremony."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise ValueError(f"parameter name mismatch: {sorted(missing)[:5]}")
        for name, p in own.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = state[name].astype(np.float32).copy()


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, zero: bool = False):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        if zero:
            w = np.zeros((kernel, kernel, cin, cout))
        else:
            std = np.sqrt(2.0 / (kernel * kernel * cin))
            w = rng.normal(0.0, std, (kernel, kernel, cin, cout))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return x.conv2d(self.weight, self.stride, self.padding) + self.bias


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((cin, cout)) if zero else rng.normal(0.0, np.sqrt(1.0 / cin), (cin, cout))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 4, eps: float = 1e-5):
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return x.group_norm(self.gamma, self.beta, self.groups, self.eps)
