"""Per-modality feature extraction.

A stride-4 patch-embedding stem produces the shallow map that feeds two
branches: a lite-transformer block for low-frequency (shared) content and a
stack of affine coupling layers for high-frequency (modality-specific) detail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Conv2d, DepthwiseConv, Linear, Module, PointwiseConv
from .tensor import Tensor

MODALITIES = ("visible", "infrared")
SCALE_CLAMP = 2.0


@dataclass
class FeaturePair:
    psi_lfe: Tensor
    psi_hfe: Tensor
    modality: str

    def __post_init__(self):
        if self.psi_lfe.shape != self.psi_hfe.shape:
            raise ShapeError(f"LFE {self.psi_lfe.shape} and HFE {self.psi_hfe.shape} shapes differ")

    def concatenated(self) -> Tensor:
        return T.concat([self.psi_lfe, self.psi_hfe], axis=1)


class Stem(Module):
    """Stride-4 convolutional patch embedding, [b,3,H,W] -> [b,C,H/4,W/4]."""

    stride = 4

    def __init__(self, channels: int, rng: np.random.Generator, in_channels: int = 3):
        self.conv = Conv2d(in_channels, channels, self.stride, rng, stride=self.stride)

    def forward(self, image: Tensor) -> Tensor:
        h, w = image.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"image size {h}x{w} is not divisible by {self.stride}")
        return self.conv(image)


class LiteTransformerBlock(Module):
    """Half the channels go through a depthwise conv, the other half through
    single-head self-attention over H*W positions; a position-wise
    feed-forward mixer with a residual combines them."""

    def __init__(self, channels: int, rng: np.random.Generator, mlp_ratio: int = 2):
        if channels % 2:
            raise ShapeError(f"lite transformer needs an even channel count, got {channels}")
        half = channels // 2
        self.local = DepthwiseConv(half, rng)
        self.query = Linear(half, half, rng, bias=False)
        self.key = Linear(half, half, rng, bias=False)
        self.value = Linear(half, half, rng, bias=False)
        self.mix_in = Linear(channels, mlp_ratio * channels, rng)
        self.mix_out = Linear(mlp_ratio * channels, channels, rng)
        self.last_attention: np.ndarray | None = None

    def attend(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).swapaxes(1, 2)
        q, k, v = self.query(tokens), self.key(tokens), self.value(tokens)
        attn = T.softmax(q @ k.swapaxes(1, 2) / math.sqrt(c), axis=-1)
        self.last_attention = attn.data
        return (attn @ v).swapaxes(1, 2).reshape(b, c, h, w)

    def forward(self, psi_s: Tensor) -> Tensor:
        b, c, h, w = psi_s.shape
        if c % 2:
            raise ShapeError(f"cannot split {c} channels in half")
        x_local, x_global = T.split(psi_s, 2, axis=1)
        z = T.concat([self.local(x_local), self.attend(x_global)], axis=1)
        tokens = z.reshape(b, c, h * w).swapaxes(1, 2)
        mixed = self.mix_out(T.gelu(self.mix_in(tokens)))
        return z + mixed.swapaxes(1, 2).reshape(b, c, h, w)


class BottleneckResidualBlock(Module):
    """Expand (1x1) -> depthwise 3x3 -> project (1x1), expansion factor 2."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, expansion: int = 2,
                 residual: bool = True, project_std: float | None = None):
        hidden = expansion * c_in
        self.expand = PointwiseConv(c_in, hidden, rng)
        self.depthwise = DepthwiseConv(hidden, rng)
        self.project = PointwiseConv(hidden, c_out, rng, std=project_std)
        self.residual = residual and c_in == c_out

    def forward(self, x: Tensor) -> Tensor:
        y = T.gelu(self.expand(x))
        y = T.gelu(self.depthwise(y))
        y = self.project(y)
        return x + y if self.residual else y


class CouplingLayer(Module):
    """y1 = x1 + I1(x2);  y2 = x2 * exp(clamp(I2(y1))) + I3(y1); output [y2, y1]."""

    def __init__(self, channels: int, rng: np.random.Generator, project_std: float | None = None):
        half = channels // 2
        self.shift_first = BottleneckResidualBlock(half, half, rng, residual=False, project_std=project_std)
        self.scale = BottleneckResidualBlock(half, half, rng, residual=False, project_std=project_std)
        self.shift_second = BottleneckResidualBlock(half, half, rng, residual=False, project_std=project_std)

    @property
    def mappings(self) -> tuple[Module, Module, Module]:
        return self.shift_first, self.scale, self.shift_second

    def forward(self, x: Tensor) -> Tensor:
        x1, x2 = T.split(x, 2, axis=1)
        y1 = x1 + self.shift_first(x2)
        s = T.clamp(self.scale(y1), -SCALE_CLAMP, SCALE_CLAMP)
        y2 = x2 * T.exp(s) + self.shift_second(y1)
        return T.concat([y2, y1], axis=1)

    def inverse(self, y: Tensor) -> Tensor:
        y2, y1 = T.split(y, 2, axis=1)
        s = T.clamp(self.scale(y1), -SCALE_CLAMP, SCALE_CLAMP)
        x2 = (y2 - self.shift_second(y1)) * T.exp(-s)
        x1 = y1 - self.shift_first(x2)
        return T.concat([x1, x2], axis=1)


class InvertibleModule(Module):
    def __init__(self, channels: int, rng: np.random.Generator, layers: int = 3,
                 project_std: float | None = None):
        if channels < 2 or channels % 2:
            raise ShapeError(f"coupling layers need an even channel count >= 2, got {channels}")
        self.channels = channels
        self.layers = [CouplingLayer(channels, rng, project_std) for _ in range(layers)]

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected [b,{self.channels},h,w], got {x.shape}")

    def forward(self, psi_s: Tensor) -> Tensor:
        self._check(psi_s)
        x = psi_s
        for layer in self.layers:
            x = layer(x)
        return x

    def inverse(self, psi_hfe: Tensor) -> Tensor:
        self._check(psi_hfe)
        x = psi_hfe
        for layer in reversed(self.layers):
            x = layer.inverse(x)
        return x


def lfe_forward(psi_s: Tensor, block: LiteTransformerBlock) -> Tensor:
    return block(psi_s)


def hfe_forward(psi_s: Tensor, inn: InvertibleModule) -> Tensor:
    return inn(psi_s)


def hfe_inverse(psi_hfe: Tensor, inn: InvertibleModule) -> Tensor:
    return inn.inverse(psi_hfe)


class FrequencyExtractor(Module):
    """Stem plus LFE/HFE branches for one modality."""

    def __init__(self, modality: str, channels: int, rng: np.random.Generator, inn_layers: int = 3):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        self.modality = modality
        self.stem = Stem(channels, rng)
        self.lfe = LiteTransformerBlock(channels, rng)
        self.hfe = InvertibleModule(channels, rng, layers=inn_layers)

    def forward(self, image: Tensor) -> FeaturePair:
        psi_s = self.stem(image)
        return FeaturePair(self.lfe(psi_s), self.hfe(psi_s), self.modality)
