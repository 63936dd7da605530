"""Layers built on :mod:`assemblypolicy.tensor`.

Dense and transposed-convolution weights are drawn from normal(0, 1/fan_in)
so activations keep roughly unit scale; embeddings and positional tables use
normal(0, 0.02). Biases start at zero. Layers work on arbitrary leading batch axes.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

INIT_STD = 0.02


class Module:
    """Container that discovers parameters and sub-modules by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            yield from _walk(value, full)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value[k], f"{name}.{k}")


def normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


def zeros(shape) -> Parameter:
    return Parameter(np.zeros(shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = normal(rng, (d_in, d_out), std=d_in ** -0.5)
        self.bias = zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = zeros((d,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class ConvTranspose2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 4, stride: int = 2, padding: int = 1):
        fan_in = c_in * (k // stride) ** 2   # taps that reach each output pixel
        self.weight = normal(rng, (c_in, c_out, k, k), std=fan_in ** -0.5)
        self.bias = zeros((c_out,))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., T, D) -> (..., heads, T, D/heads)."""
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, heads, d // heads)
    nl = len(lead)
    return T.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    nl = len(lead)
    x = T.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return x.reshape(*lead, t, h * dk)


class Attention(Module):
    """Multi-head scaled dot-product attention with a residual-free output.

    Projections W_Q, W_K, W_V map to ``d_model``; heads share the width
    evenly (d_k = d_model / heads). There is no output projection: heads
    are concatenated back to ``d_model``. ``bias`` is added to the scores
    before the softmax and broadcasts over heads; ``keep`` marks
    admissible (query, key) pairs.
    """

    def __init__(self, rng, d_model: int, heads: int, d_kv: int | None = None):
        if d_model % heads:
            raise ValueError(f"width {d_model} not divisible by {heads} heads")
        d_kv = d_model if d_kv is None else d_kv
        self.w_q = Linear(rng, d_model, d_model, bias=False)
        self.w_k = Linear(rng, d_kv, d_model, bias=False)
        self.w_v = Linear(rng, d_kv, d_model, bias=False)
        self.heads = heads
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, context: Tensor | None = None,
                 bias: Tensor | None = None, keep: np.ndarray | None = None) -> Tensor:
        ctx = x if context is None else context
        q = split_heads(self.w_q(x), self.heads)
        k = split_heads(self.w_k(ctx), self.heads)
        v = split_heads(self.w_v(ctx), self.heads)
        dk = q.shape[-1]
        scores = (q @ k.T) * (1.0 / np.sqrt(dk))
        if bias is not None:
            scores = scores + bias
        if keep is not None:
            scores = T.where_mask(scores, keep)
        attn = T.softmax(scores, axis=-1)
        self.last_weights = attn.data
        return merge_heads(attn @ v)
