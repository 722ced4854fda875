"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Tensor


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``t``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    with Graph() as g:
        loss = fn()
    grads = g.backward(loss)
    return [grads.get(p, np.zeros_like(p.data)) for p in params]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Max elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients."""
    worst = 0.0
    for p, ga in zip(params, analytic_grads(fn, params)):
        gn = numeric_grad(fn, p, h)
        worst = max(worst, relative_error(ga, gn))
    return worst
