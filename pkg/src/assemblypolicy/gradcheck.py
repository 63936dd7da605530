"""Finite-difference gradient checks for the autodiff engine.

Two flavours: ``elementwise`` compares every coordinate of every input and is
meant for small op tests; ``directional`` compares the analytic directional
derivative against a central difference along random directions, which
covers all parameters of a large model at two evaluations per direction.
Both should be run at float64.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

Loss = Callable[[], Tensor]


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def analytic(loss: Loss, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    out = loss()
    if out.data.size != 1:
        raise ValueError(f"gradient check needs a scalar loss, got shape {out.shape}")
    out.backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def numeric(loss: Loss, inputs: Sequence[Tensor], eps: float = 1e-6) -> list[np.ndarray]:
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(loss().data)
            flat[i] = old - eps
            down = float(loss().data)
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def elementwise(loss: Loss, inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Largest per-input relative error (L2 norms) between analytic and numeric gradients."""
    a = analytic(loss, inputs)
    n = numeric(loss, inputs, eps)
    return max(_rel(x, y) for x, y in zip(a, n))


def directional(loss: Loss, inputs: Sequence[Tensor], rng: np.random.Generator,
                directions: int = 4, eps: float = 1e-6) -> float:
    """Largest relative error of ``grad . d`` against a central difference along random ``d``."""
    grads = analytic(loss, inputs)
    worst = 0.0
    for _ in range(directions):
        dirs = [rng.standard_normal(t.shape) for t in inputs]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        pred = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        saved = [t.data.copy() for t in inputs]
        for t, d, s in zip(inputs, dirs, saved):
            t.data = s + eps * d
        up = float(loss().data)
        for t, d, s in zip(inputs, dirs, saved):
            t.data = s - eps * d
        down = float(loss().data)
        for t, s in zip(inputs, saved):
            t.data = s
        fd = (up - down) / (2 * eps)
        worst = max(worst, abs(pred - fd) / max(abs(pred), abs(fd), 1e-12))
    return worst
