"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class; parameters and sub-modules are discovered from attributes
    in assignment order, which fixes checkpoint naming."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"missing tensors: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape, std: float) -> Parameter:
    return Parameter(rng.standard_normal(shape) * std)


class Linear(Module):
    """y = x W + b over the last axis; W is stored as [in, out]."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        self.weight = _normal(rng, (n_in, n_out), std if std is not None else n_in ** -0.5)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.weight + self.bias


class PointwiseConv(Module):
    """1x1 convolution on [b, c, h, w] maps."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, std: float | None = None):
        self.weight = _normal(rng, (c_out, c_in), std if std is not None else c_in ** -0.5)
        self.bias = Parameter(np.zeros((c_out, 1)))

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        y = self.weight @ x.reshape(b, c, h * w) + self.bias
        return y.reshape(b, -1, h, w)


class DepthwiseConv(Module):
    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 3):
        self.weight = _normal(rng, (channels, 1, kernel, kernel), 1.0 / kernel)
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_depthwise(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = _normal(rng, (c_out, c_in, kernel, kernel), (2.0 / fan_in) ** 0.5)
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
