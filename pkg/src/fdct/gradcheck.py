"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .nn import Parameter
from .tensor import Tensor


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    """|a - n| / max(|a|, |n|); pairs that are both below ``floor`` count as exact."""
    scale = max(abs(analytic), abs(numeric))
    if scale < floor:
        return 0.0
    return abs(analytic - numeric) / scale


def numeric_grad(fn: Callable[[], Tensor], p: Parameter, index, h: float = 1e-6) -> float:
    old = p.data[index]
    with T.no_grad():
        p.data[index] = old + h
        up = fn().item()
        p.data[index] = old - h
        down = fn().item()
    p.data[index] = old
    return (up - down) / (2 * h)


@dataclass
class GradCheckResult:
    errors: dict[str, list[float]] = field(default_factory=dict)   # parameter -> sampled rel errors
    tol: float = 1e-3

    @property
    def passed(self) -> dict[str, bool]:
        return {name: bool(max(errs) < self.tol) for name, errs in self.errors.items()}

    @property
    def pass_fraction(self) -> float:
        flags = list(self.passed.values())
        return sum(flags) / len(flags) if flags else 1.0

    def worst(self, n: int = 5) -> list[tuple[str, float]]:
        return sorted(((k, max(v)) for k, v in self.errors.items()), key=lambda kv: -kv[1])[:n]


def check_gradients(fn: Callable[[], Tensor], params: Iterable[tuple[str, Parameter]],
                    samples: int = 3, h: float = 1e-6, tol: float = 1e-3,
                    seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients of the scalar ``fn()`` with central differences
    on up to ``samples`` random entries of every parameter.

    Parameters the loss does not reach (zero analytic gradient) are still checked:
    their finite differences must vanish too. Run under ``precision(np.float64)``.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    fn().backward()
    rng = np.random.default_rng(seed)
    result = GradCheckResult(tol=tol)
    for name, p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = rng.choice(p.size, size=min(samples, p.size), replace=False)
        errs = []
        for k in flat:
            index = np.unravel_index(k, p.shape)
            errs.append(relative_error(float(grad[index]), numeric_grad(fn, p, index, h)))
        result.errors[name] = errs
    return result
