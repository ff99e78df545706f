"""Cross-modal alignment objectives over UDT tokens.

* ITA: symmetric InfoNCE between pooled, projected pair embeddings.
* SCMA: sparsemax cross-attention between token sets, then a bidirectional
  token-level InfoNCE inside each pair.
* CPA: swapped prediction of Sinkhorn soft cluster assignments against a
  bank of trainable prototypes.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError, WeightError
from .nn import Linear, Module, Parameter
from .tensor import Tensor

GAMMA_ITA = 0.1
GAMMA_SCMA = 0.07
GAMMA_CPA = 0.2
SINKHORN_ITERS = 3
SINKHORN_EPS = 0.05


# sparsemax

def _sparsemax_forward(z: np.ndarray) -> np.ndarray:
    n = z.shape[-1]
    srt = -np.sort(-z, axis=-1)
    cssv = np.cumsum(srt, axis=-1) - 1.0
    k = np.arange(1, n + 1, dtype=z.dtype)
    support = srt * k > cssv
    k_z = support.sum(axis=-1, keepdims=True)
    tau = np.take_along_axis(cssv, k_z - 1, axis=-1) / k_z.astype(z.dtype)
    return np.maximum(z - tau, 0.0)


def sparsemax(v, axis: int = -1) -> Tensor:
    """Euclidean projection of each slice along ``axis`` onto the probability simplex."""
    v = T.as_tensor(v)
    if np.isnan(v.data).any():
        raise DomainError("sparsemax input contains NaN", operand=0)
    z = np.moveaxis(v.data, axis, -1)
    p = _sparsemax_forward(z)
    out = np.moveaxis(p, -1, axis)
    mask = out > 0

    def bw(g):
        gs = g * mask
        mean = gs.sum(axis=axis, keepdims=True) / mask.sum(axis=axis, keepdims=True)
        return (mask * (g - mean),)

    return T._make(out, (v,), bw, "sparsemax")


# projection heads

class ProjectionHead(Module):
    """Two-layer nonlinear map D -> d."""

    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator):
        self.fc1 = Linear(dim_in, dim_in, rng)
        self.fc2 = Linear(dim_in, dim_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class CrossAttention(Module):
    """Q, K, V and output maps (d x d) for sparse cross-modal attention."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng, bias=False)
        self.o = Linear(dim, dim, rng, bias=False)


class PrototypeBank(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        c = rng.standard_normal((count, dim))
        self.prototypes = Parameter(c / np.linalg.norm(c, axis=1, keepdims=True))

    def renormalize(self) -> None:
        c = self.prototypes.data
        norms = np.linalg.norm(c, axis=1, keepdims=True)
        self.prototypes.data = (c / np.maximum(norms, 1e-12)).astype(c.dtype)


class ProjectionHeads(Module):
    """Instance heads h_V, h_I; separate token projections; cross-attention maps."""

    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator):
        self.inst_vis = ProjectionHead(dim_in, dim_out, rng)
        self.inst_ir = ProjectionHead(dim_in, dim_out, rng)
        self.tok_vis = ProjectionHead(dim_in, dim_out, rng)
        self.tok_ir = ProjectionHead(dim_in, dim_out, rng)
        self.cross = CrossAttention(dim_out, rng)

    def instance_embeddings(self, pooled_vis: Tensor, pooled_ir: Tensor) -> tuple[Tensor, Tensor]:
        return (T.l2_normalize(self.inst_vis(pooled_vis)),
                T.l2_normalize(self.inst_ir(pooled_ir)))

    def token_embeddings(self, tokens_vis: Tensor, tokens_ir: Tensor) -> tuple[Tensor, Tensor]:
        return (T.l2_normalize(self.tok_vis(tokens_vis)),
                T.l2_normalize(self.tok_ir(tokens_ir)))


# ITA

def _diag(x: Tensor) -> Tensor:
    n = x.shape[-1]
    return (x * np.eye(n, dtype=x.dtype)).sum(axis=-1)


def info_nce_symmetric(emb_vis: Tensor, emb_ir: Tensor, gamma: float) -> Tensor:
    """Mean of both InfoNCE directions; row j of each input is a positive pair."""
    if emb_vis.shape != emb_ir.shape or emb_vis.ndim != 2:
        raise ShapeError(f"expected matching [B,d] embeddings, got {emb_vis.shape}, {emb_ir.shape}")
    logits = emb_vis @ emb_ir.T / gamma
    v2i = _diag(T.log_softmax(logits, axis=1))
    i2v = _diag(T.log_softmax(logits, axis=0))
    m = emb_vis.shape[0]
    return -(v2i.sum() + i2v.sum()) / (2 * m)


def ita_loss(pooled_vis: Tensor, pooled_ir: Tensor, heads: ProjectionHeads, gamma: float = GAMMA_ITA) -> Tensor:
    y_hat, z_hat = heads.instance_embeddings(pooled_vis, pooled_ir)
    return info_nce_symmetric(y_hat, z_hat, gamma)


# SCMA

def scma_attend(tokens_a: Tensor, tokens_b: Tensor, cross: CrossAttention) -> tuple[Tensor, Tensor]:
    """Each token of ``tokens_a`` attends over ``tokens_b`` with sparsemax.

    Accepts [N, d] or [b, N, d]. Returns (embeddings, attention weights).
    """
    if tokens_a.shape != tokens_b.shape:
        raise ShapeError(f"token sets differ in shape: {tokens_a.shape} vs {tokens_b.shape}")
    q, k = cross.q(tokens_a), cross.k(tokens_b)
    logits = q @ k.swapaxes(-1, -2) / math.sqrt(cross.dim)
    alpha = sparsemax(logits, axis=-1)
    return cross.o(alpha @ cross.v(tokens_b)), alpha


def _check_weights(w, shape) -> np.ndarray:
    if w is None:
        return np.ones(shape)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), shape)
    if np.any(w < 0):
        raise WeightError("token weights must be non-negative")
    return w


def token_alignment(tokens: Tensor, other: Tensor, cross: CrossAttention, gamma: float,
                    weights=None) -> Tensor:
    """One direction of SCMA (VITA when ``tokens`` are visible)."""
    a, _ = scma_attend(tokens, other, cross)
    a = T.l2_normalize(a, eps=1e-12)
    sim = tokens @ a.swapaxes(-1, -2) / gamma          # sim[i, k] = cos(token_i, a_k) / gamma
    per_token = -(_diag(T.log_softmax(sim, axis=-1)) + _diag(T.log_softmax(sim, axis=-2)))
    w = _check_weights(weights, per_token.shape).astype(per_token.dtype)
    count = per_token.size
    return (per_token * w).sum() / (2 * count)


def scma_loss(tokens_vis: Tensor, tokens_ir: Tensor, cross: CrossAttention, gamma: float = GAMMA_SCMA,
              weights_vis=None, weights_ir=None) -> Tensor:
    """(VITA + IVTA) / 2 on projected, L2-normalized tokens [b, N, d]."""
    vita = token_alignment(tokens_vis, tokens_ir, cross, gamma, weights_vis)
    ivta = token_alignment(tokens_ir, tokens_vis, cross, gamma, weights_ir)
    return (vita + ivta) / 2


# CPA

def _sorted_sum(x: np.ndarray, axis: int) -> np.ndarray:
    # summing in sorted order makes the result independent of element order
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=True)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(_sorted_sum(np.exp(x - m), axis))


def sinkhorn_assign(similarities, iters: int = SINKHORN_ITERS, eps: float = SINKHORN_EPS) -> np.ndarray:
    """Balanced soft assignments of B samples to E prototypes.

    Starts from exp(sim / eps) and alternately rescales columns to sum B/E
    and rows to sum 1, in the log domain. Rows of the result are probability
    vectors. No gradient flows through the result.
    """
    sim = np.asarray(similarities.data if isinstance(similarities, Tensor) else similarities,
                     dtype=np.float64)
    if sim.ndim != 2 or sim.size == 0:
        raise ShapeError(f"expected a non-empty [B,E] matrix, got shape {sim.shape}")
    if not np.isfinite(sim).all():
        raise DomainError("similarities must be finite", operand=0)
    b, e = sim.shape
    # Vectorized exp/sum may round differently depending on where an element
    # sits in memory, so iterate in a canonical order (rows and columns keyed
    # by their own sorted contents) and map back. Permuting samples or
    # prototypes then permutes the result exactly.
    rows = np.lexsort(np.sort(sim, axis=1).T[::-1])
    cols = np.lexsort(np.sort(sim, axis=0)[::-1])
    log_q = np.ascontiguousarray(sim[rows][:, cols]) / eps
    log_col = np.log(b / e)
    for _ in range(iters):
        log_q = log_q - _logsumexp(log_q, 0) + log_col
        log_q = log_q - _logsumexp(log_q, 1)
    q = np.empty_like(log_q)
    q[np.ix_(rows, cols)] = np.exp(log_q)
    return q


def cpa_loss(emb_vis: Tensor, emb_ir: Tensor, bank: PrototypeBank | Tensor, gamma: float = GAMMA_CPA,
             iters: int = SINKHORN_ITERS, eps: float = SINKHORN_EPS,
             assignments: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Swapped cross-entropy between prototype softmax predictions and the
    other modality's Sinkhorn assignments, averaged over 2B terms.

    ``assignments`` = (q_vis, q_ir) overrides the Sinkhorn step, e.g. to hold
    the targets fixed during finite-difference checks.
    """
    protos = bank.prototypes if isinstance(bank, PrototypeBank) else bank
    sim_vis = emb_vis @ protos.T
    sim_ir = emb_ir @ protos.T
    if assignments is None:
        q_vis, q_ir = sinkhorn_assign(sim_vis, iters, eps), sinkhorn_assign(sim_ir, iters, eps)
    else:
        q_vis, q_ir = (np.asarray(q) for q in assignments)
    for q in (q_vis, q_ir):
        if q.shape != sim_vis.shape:
            raise ShapeError(f"assignments {q.shape} do not match [B,E] = {sim_vis.shape}")
    log_p_vis = T.log_softmax(sim_vis / gamma, axis=1)
    log_p_ir = T.log_softmax(sim_ir / gamma, axis=1)
    dtype = sim_vis.dtype
    swapped = (log_p_vis * q_ir.astype(dtype)).sum() + (log_p_ir * q_vis.astype(dtype)).sum()
    return -swapped / (2 * emb_vis.shape[0])
