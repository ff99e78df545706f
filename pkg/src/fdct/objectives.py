"""Decomposition loss, classification loss and the weighted total objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import LabelError, NumericError, ShapeError
from .extractors import FeaturePair
from .nn import Linear, Module
from .tensor import Tensor
from .udt import TokenSet

BETA = 1.0001
_VAR_FLOOR = 1e-12

LOSS_COLUMNS = ("ita", "scma", "cpa", "decp", "ce", "total")


class Correlation(NamedTuple):
    value: Tensor
    degenerate: bool


def correlation_coefficient(a: Tensor, b: Tensor) -> Correlation:
    """Pearson correlation per sample over flattened features, batch-averaged.

    Samples where either input has (numerically) zero variance contribute 0
    and set ``degenerate``.
    """
    if a.shape != b.shape:
        raise ShapeError(f"correlation needs equal shapes, got {a.shape} and {b.shape}")
    batched = a.ndim >= 2
    fa = a.reshape(a.shape[0], -1) if batched else a.reshape(1, -1)
    fb = b.reshape(fa.shape)
    if fa.shape[1] < 2:
        raise ShapeError("correlation needs at least two elements per sample")
    ca = fa - fa.mean(axis=1, keepdims=True)
    cb = fb - fb.mean(axis=1, keepdims=True)
    saa = (ca * ca).sum(axis=1)
    sbb = (cb * cb).sum(axis=1)
    sab = (ca * cb).sum(axis=1)
    ok = (saa.data > _VAR_FLOOR) & (sbb.data > _VAR_FLOOR)
    mask = ok.astype(saa.dtype)
    denom = T.sqrt(saa * sbb * mask + (1.0 - mask))
    r = sab / denom * mask
    return Correlation(r.mean(), bool((~ok).any()))


def decomposition_from_correlations(cor_hfe, cor_lfe, beta: float = BETA):
    return cor_hfe * cor_hfe / (cor_lfe + beta)


class Decomposition(NamedTuple):
    value: Tensor
    cor_hfe: float
    cor_lfe: float
    degenerate: bool


def decomposition_loss(fp_vis: FeaturePair, fp_ir: FeaturePair, beta: float = BETA) -> Decomposition:
    """Squared cross-modal HFE correlation over (LFE correlation + beta)."""
    if fp_vis.psi_hfe.shape != fp_ir.psi_hfe.shape:
        raise ShapeError(f"modalities disagree in feature shape: {fp_vis.psi_hfe.shape} vs {fp_ir.psi_hfe.shape}")
    hfe = correlation_coefficient(fp_vis.psi_hfe, fp_ir.psi_hfe)
    lfe = correlation_coefficient(fp_vis.psi_lfe, fp_ir.psi_lfe)
    value = decomposition_from_correlations(hfe.value, lfe.value, beta)
    return Decomposition(value, hfe.value.item(), lfe.value.item(), hfe.degenerate or lfe.degenerate)


class ClassifierHead(Module):
    def __init__(self, dim: int, classes: int, rng: np.random.Generator):
        self.classes = classes
        self.fc = Linear(2 * dim, classes, rng)

    def forward(self, pooled_vis: Tensor, pooled_ir: Tensor) -> Tensor:
        return self.fc(T.concat([pooled_vis, pooled_ir], axis=1))


def classify(tokens_vis: TokenSet, tokens_ir: TokenSet, head: ClassifierHead) -> Tensor:
    return head(tokens_vis.pooled, tokens_ir.pooled)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    b, classes = logits.shape
    if labels.shape != (b,):
        raise LabelError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, classes), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1
    return -(T.log_softmax(logits, axis=1) * onehot).sum() / b


@dataclass(frozen=True)
class LossWeights:
    ita: float = 1.0      # sigma_1
    scma: float = 1.0     # sigma_2
    cpa: float = 1.0      # sigma_3
    decp: float = 1.0     # Gamma_1
    ce: float = 1.0       # Gamma_2

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LossBreakdown:
    ita: float
    scma: float
    cpa: float
    decp: float
    ce: float
    total: float
    weights: LossWeights
    total_tensor: Tensor | None = field(default=None, repr=False)

    def row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in LOSS_COLUMNS}

    def backward(self) -> None:
        if self.total_tensor is None:
            raise RuntimeError("breakdown carries no differentiable total")
        self.total_tensor.backward()


def total_loss(parts: dict[str, Tensor | float], weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of the five components. Components whose weight is zero
    are logged but contribute neither value nor gradient."""
    values: dict[str, float] = {}
    total = None
    for name in LOSS_COLUMNS[:-1]:
        part = parts[name]
        val = part.item() if isinstance(part, Tensor) else float(part)
        if not math.isfinite(val):
            raise NumericError(f"loss component {name!r} is not finite ({val})", where=name)
        values[name] = val
        w = getattr(weights, name)
        if w == 0:
            continue
        term = part * w if isinstance(part, Tensor) else T.as_tensor(val * w)
        total = term if total is None else total + term
    if total is None:
        total = T.as_tensor(0.0)
    return LossBreakdown(total=total.item(), weights=weights, total_tensor=total, **values)
