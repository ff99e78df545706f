"""Unified discrete token (UDT) encoder shared by both modalities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError
from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import Tensor


@dataclass(frozen=True)
class UdtConfig:
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    in_channels: int = 32       # channels of the concatenated LFE|HFE map (2C)
    grid: tuple[int, int] = (8, 8)
    mlp_ratio: int = 2

    def __post_init__(self):
        h, w = self.grid
        if h % self.patch or w % self.patch:
            raise ShapeError(f"feature grid {h}x{w} is not divisible by patch size {self.patch}")
        if self.dim % self.heads:
            raise ShapeError(f"embed dim {self.dim} is not divisible by {self.heads} heads")

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return (h * w) // (self.patch * self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.in_channels


@dataclass
class TokenSet:
    tokens: Tensor      # [b, N, D]
    pooled: Tensor      # [b, D], mean over tokens
    attention: np.ndarray | None = None   # final-block attention [b, h, N, N]

    def token_importance(self) -> np.ndarray:
        """Mean attention mass each token receives in the final block, scaled
        so weights sum to N per sample. Uniform when no attention was recorded."""
        b, n = self.tokens.shape[:2]
        if self.attention is None:
            return np.ones((b, n))
        return self.attention.mean(axis=(1, 2)) * n


def patchify(features: Tensor, patch: int) -> Tensor:
    """[b, c, H, W] -> [b, N, P*P*c], patches in row-major grid order, each
    flattened channel-major."""
    b, c, h, w = features.shape
    if h % patch or w % patch:
        raise ShapeError(f"spatial dims {h}x{w} are not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = features.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def unpatchify(patches: np.ndarray, channels: int, grid: tuple[int, int], patch: int) -> np.ndarray:
    b = patches.shape[0]
    gh, gw = grid
    x = patches.reshape(b, gh, gw, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, gh * patch, gw * patch)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"embed dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.w_q = Linear(dim, dim, rng, bias=False)
        self.w_k = Linear(dim, dim, rng, bias=False)
        self.w_v = Linear(dim, dim, rng, bias=False)
        self.w_o = Linear(dim, dim, rng)
        self.last_attention: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, n, d = q.shape
        dk = d // self.heads
        qh, kh, vh = self._heads(self.w_q(q)), self._heads(self.w_k(k)), self._heads(self.w_v(v))
        attn = T.softmax(qh @ kh.swapaxes(-1, -2) / math.sqrt(dk), axis=-1)
        self.last_attention = attn.data
        out = (attn @ vh).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.w_o(out)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, mha: MultiHeadAttention) -> Tensor:
    return mha(q, k, v)


class EncoderBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm_mlp = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h)
        return x + self.fc2(T.gelu(self.fc1(self.norm_mlp(x))))


class UdtEncoder(Module):
    def __init__(self, cfg: UdtConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Linear(cfg.patch_dim, cfg.dim, rng)
        self.pos = Parameter(rng.standard_normal((cfg.num_tokens, cfg.dim)) * 0.02)
        self.blocks = [EncoderBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)

    def forward(self, features: Tensor) -> TokenSet:
        return self.encode(patchify(features, self.cfg.patch))

    def encode(self, patches: Tensor) -> TokenSet:
        if patches.shape[-1] != self.cfg.patch_dim:
            raise ShapeError(f"patch length {patches.shape[-1]} != projection input {self.cfg.patch_dim}")
        if patches.shape[-2] != self.cfg.num_tokens:
            raise ShapeError(f"got {patches.shape[-2]} patches, positional table has {self.cfg.num_tokens}")
        x = self.embed(patches) + self.pos
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not np.isfinite(x.data).all():
                raise NumericError(f"non-finite activations after encoder block {i}", where=f"udt.blocks.{i}")
        tokens = self.norm(x)
        attention = self.blocks[-1].attn.last_attention if self.blocks else None
        return TokenSet(tokens, tokens.mean(axis=1), attention)


def udt_forward(patches: Tensor, encoder: UdtEncoder) -> TokenSet:
    return encoder.encode(patches)
