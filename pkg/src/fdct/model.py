"""The fusion classifier and the single-modality baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import alignment as A
from . import tensor as T
from .extractors import FeaturePair, FrequencyExtractor, Stem
from .nn import Conv2d, Linear, Module
from .objectives import (ClassifierHead, LossBreakdown, LossWeights, cross_entropy_loss,
                         decomposition_loss, total_loss)
from .tensor import Tensor
from .udt import TokenSet, UdtConfig, UdtEncoder


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 16
    inn_layers: int = 3
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    proj_dim: int = 32
    prototypes: int = 10
    classes: int = 6
    gamma1: float = A.GAMMA_ITA
    gamma2: float = A.GAMMA_SCMA
    gamma3: float = A.GAMMA_CPA
    sinkhorn_iters: int = A.SINKHORN_ITERS
    sinkhorn_eps: float = A.SINKHORN_EPS
    weighting: str = "uniform"
    beta: float = 1.0001

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3", "sinkhorn_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weighting not in ("uniform", "attention"):
            raise ValueError(f"unknown SCMA weighting {self.weighting!r}")

    @property
    def grid(self) -> int:
        return self.image_size // Stem.stride

    def udt_config(self) -> UdtConfig:
        return UdtConfig(patch=self.patch, dim=self.dim, depth=self.depth, heads=self.heads,
                         in_channels=2 * self.channels, grid=(self.grid, self.grid))


@dataclass
class Outputs:
    features_vis: FeaturePair
    features_ir: FeaturePair
    tokens_vis: TokenSet
    tokens_ir: TokenSet
    logits: Tensor
    extras: dict = field(default_factory=dict)


class FDCT(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vis = FrequencyExtractor("visible", cfg.channels, rng, cfg.inn_layers)
        self.ir = FrequencyExtractor("infrared", cfg.channels, rng, cfg.inn_layers)
        self.udt = UdtEncoder(cfg.udt_config(), rng)
        self.align = A.ProjectionHeads(cfg.dim, cfg.proj_dim, rng)
        self.bank = A.PrototypeBank(cfg.prototypes, cfg.proj_dim, rng)
        self.cls = ClassifierHead(cfg.dim, cfg.classes, rng)

    def forward(self, image_vis, image_ir) -> Outputs:
        fv = self.vis(T.as_tensor(image_vis))
        fi = self.ir(T.as_tensor(image_ir))
        tv = self.udt(fv.concatenated())
        ti = self.udt(fi.concatenated())
        return Outputs(fv, fi, tv, ti, self.cls(tv.pooled, ti.pooled))

    def predict_logits(self, image_vis, image_ir, drop: str | None = None) -> np.ndarray:
        """Logits without recording a graph. ``drop`` in {"visible", "infrared"}
        zeroes that modality's pooled embedding (single-modality diagnostic)."""
        with T.no_grad():
            out = self.forward(image_vis, image_ir)
            pv, pi = out.tokens_vis.pooled, out.tokens_ir.pooled
            if drop == "visible":
                pv = T.as_tensor(np.zeros_like(pv.data))
            elif drop == "infrared":
                pi = T.as_tensor(np.zeros_like(pi.data))
            elif drop is not None:
                raise ValueError(f"unknown modality {drop!r}")
            return self.cls(pv, pi).data

    def loss_parts(self, out: Outputs, labels, weights: LossWeights,
                   assignments: tuple[np.ndarray, np.ndarray] | None = None) -> dict:
        cfg = self.cfg
        parts: dict = {}

        def compute(name, fn):
            if getattr(weights, name) == 0:
                with T.no_grad():
                    parts[name] = fn()
            else:
                parts[name] = fn()

        y_hat, z_hat = self.align.instance_embeddings(out.tokens_vis.pooled, out.tokens_ir.pooled)
        compute("ita", lambda: A.info_nce_symmetric(y_hat, z_hat, cfg.gamma1))

        def scma():
            tok_v, tok_i = self.align.token_embeddings(out.tokens_vis.tokens, out.tokens_ir.tokens)
            wv = wi = None
            if cfg.weighting == "attention":
                wv, wi = out.tokens_vis.token_importance(), out.tokens_ir.token_importance()
            return A.scma_loss(tok_v, tok_i, self.align.cross, cfg.gamma2, wv, wi)

        compute("scma", scma)
        compute("cpa", lambda: A.cpa_loss(y_hat, z_hat, self.bank, cfg.gamma3, cfg.sinkhorn_iters,
                                          cfg.sinkhorn_eps, assignments))

        def decp():
            d = decomposition_loss(out.features_vis, out.features_ir, cfg.beta)
            out.extras.update(cor_hfe=d.cor_hfe, cor_lfe=d.cor_lfe, degenerate=d.degenerate)
            return d.value

        compute("decp", decp)
        compute("ce", lambda: cross_entropy_loss(out.logits, labels))
        return parts

    def loss(self, image_vis, image_ir, labels, weights: LossWeights = LossWeights(),
             assignments=None) -> LossBreakdown:
        out = self.forward(image_vis, image_ir)
        return total_loss(self.loss_parts(out, labels, weights, assignments), weights)

    def post_step(self) -> None:
        self.bank.renormalize()


class BaselineCNN(Module):
    """Four stride-2 conv blocks, global average pooling, linear head."""

    def __init__(self, classes: int, seed: int = 0, widths=(16, 32, 32, 64), in_channels: int = 3):
        rng = np.random.default_rng(seed)
        chans = (in_channels,) + tuple(widths)
        self.blocks = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, padding=1) for i in range(len(widths))]
        self.fc = Linear(chans[-1], classes, rng)

    def forward(self, image) -> Tensor:
        x = T.as_tensor(image)
        for conv in self.blocks:
            x = T.gelu(conv(x))
        return self.fc(x.mean(axis=(2, 3)))

    def predict_logits(self, image) -> np.ndarray:
        with T.no_grad():
            return self.forward(image).data

    def loss(self, image, labels) -> Tensor:
        return cross_entropy_loss(self.forward(image), labels)
