"""Dense tensors with reverse-mode automatic differentiation on a numpy backend.

Every op builds its forward value eagerly and, when any operand requires a
gradient, records a closure that accumulates the exact vector-Jacobian
product into its operands. ``Tensor.backward`` walks the recorded graph in
reverse topological order.

Broadcasting follows numpy semantics for all elementwise ops; gradients are
summed back over broadcast axes. ``matmul`` broadcasts leading (batch) axes
and requires both operands to be at least 2-D.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_default_dtype = np.float32
_grad_enabled = True


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the float precision of newly created tensors."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or arr.dtype.type is not _default_dtype:
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None, retain_graph_grads: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Only scalar tensors may start a backward pass without an explicit
        seed. Leaf gradients accumulate across calls until zeroed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topo_order(self)
        self.grad = grad.astype(self.data.dtype, copy=True) if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if not retain_graph_grads:
                node.grad = None

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)


class Parameter(Tensor):
    """A leaf tensor that always tracks gradients."""

    __slots__ = ()

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a.data, b.data, "sub")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _result(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _result(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ShapeError("log of an empty tensor")

    def backward(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out)

    return _result(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _result(a.data * mask, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _result(out.astype(a.data.dtype, copy=False), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return _result(out, (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _result(out.astype(x.dtype, copy=False), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _result(out, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _result(out, (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _result(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = a.data[idx]
    advanced = _has_advanced(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        _accum(a, full)

    return _result(np.array(out, copy=True), (a,), backward)


def scatter_rows(src: Tensor, idx, n: int) -> Tensor:
    """Place rows of ``src`` (k, ...) at positions ``idx`` of an (n, ...) zero tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) != src.shape[0]:
        raise ShapeError(f"scatter_rows: {len(idx)} indices for {src.shape[0]} rows")
    out = np.zeros((n,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, idx, src.data)

    def backward(g):
        _accum(src, g[idx])

    return _result(out, (src,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _result(out, ts, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))

    return _result(np.array(out), (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.shape))

    return _result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if n == 0:
        raise ShapeError(f"mean over empty axes {axes} of shape {a.shape}")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg / n, a.shape))

    return _result(np.asarray(out, dtype=a.data.dtype), (a,), backward)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    ax = axis % a.ndim
    arg = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), gg, axis=ax)
        _accum(a, full)

    return _result(out if keepdims else np.squeeze(out, ax), (a,), backward)


# ---------------------------------------------------------------------------
# probability
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (a,), backward)


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Categorical cross-entropy over the last axis with integer targets.

    ``targets`` has shape ``logits.shape[:-1]``. ``reduction`` is one of
    ``"mean"``, ``"sum"`` or ``"none"``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if logits.shape[-1] == 0:
        raise ShapeError("cross_entropy over an empty class axis")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ShapeError(f"cross_entropy: target out of range for {logits.shape[-1]} classes")
    logp = log_softmax(logits, axis=-1)
    picked = np.take_along_axis(logp.data, targets[..., None], axis=-1)[..., 0]
    nll = -picked
    n = max(nll.size, 1)

    def backward(g):
        if reduction == "mean":
            gg = np.broadcast_to(g / n, nll.shape)
        elif reduction == "sum":
            gg = np.broadcast_to(g, nll.shape)
        else:
            gg = g
        full = np.zeros_like(logp.data)
        np.put_along_axis(full, targets[..., None], -gg[..., None], axis=-1)
        _accum(logp, full)

    if reduction == "mean":
        out = np.asarray(nll.mean(), dtype=logits.dtype)
    elif reduction == "sum":
        out = np.asarray(nll.sum(), dtype=logits.dtype)
    elif reduction == "none":
        out = nll
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return _result(out, (logp,), backward)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = max(diff.size, 1)

    def backward(g):
        if pred.requires_grad:
            _accum(pred, g * 2.0 * diff / n)
        if target.requires_grad:
            _accum(target, -g * 2.0 * diff / n)

    return _result(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred, target), backward)


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V, D) at integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _result(out, (table,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 2, padding: int = 1) -> Tensor:
    """Strided transposed convolution, NCHW input, weight (C_in, C_out, k, k).

    Output size is ``(h - 1) * stride + k - 2 * padding`` per spatial axis.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} vs weight {w.shape}")
    n, ci, h, wd = x.shape
    _, co, k, k2 = w.shape
    s, p = stride, padding
    full_h, full_w = (h - 1) * s + k, (wd - 1) * s + k
    xf = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, ci)
    wf = w.data.reshape(ci, co * k * k2)
    cols = (xf @ wf).reshape(n, h, wd, co, k, k2)
    full = np.zeros((n, co, full_h, full_w), dtype=x.dtype)
    for a in range(k):
        for c in range(k2):
            full[:, :, a:a + s * (h - 1) + 1:s, c:c + s * (wd - 1) + 1:s] += cols[:, :, :, :, a, c].transpose(0, 3, 1, 2)
    out = full[:, :, p:full_h - p, p:full_w - p]
    if b is not None:
        out = out + b.data.reshape(1, co, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gfull = np.zeros((n, co, full_h, full_w), dtype=g.dtype)
        gfull[:, :, p:full_h - p, p:full_w - p] = g
        gcols = np.empty((n, h, wd, co, k, k2), dtype=g.dtype)
        for a in range(k):
            for c in range(k2):
                gcols[:, :, :, :, a, c] = gfull[:, :, a:a + s * (h - 1) + 1:s, c:c + s * (wd - 1) + 1:s].transpose(0, 2, 3, 1)
        gcf = gcols.reshape(-1, co * k * k2)
        if x.requires_grad:
            _accum(x, (gcf @ wf.T).reshape(n, h, wd, ci).transpose(0, 3, 1, 2))
        if w.requires_grad:
            _accum(w, (xf.T @ gcf).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _result(np.ascontiguousarray(out), parents, backward)


def bilinear_weights(h: int, w: int, coords: np.ndarray):
    """Corner indices and weights for bilinear reads at (u, v) pixel coords.

    Integer coordinates address pixel centers; coords outside
    ``[0, w-1] x [0, h-1]`` are clamped to the edge.
    """
    coords = np.asarray(coords, dtype=np.float64)
    u = np.clip(coords[..., 0], 0.0, w - 1)
    v = np.clip(coords[..., 1], 0.0, h - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    idx = (v0, u0), (v0, u1), (v1, u0), (v1, u1)
    wts = (1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv
    return idx, wts


def grid_sample(fmap: Tensor, coords) -> Tensor:
    """Bilinearly sample ``fmap`` (N, C, h, w) at one (u, v) per batch item.

    ``coords`` (N, 2) are constants in pixel units; the result is (N, C).
    Differentiable with respect to ``fmap`` only.
    """
    if fmap.ndim != 4 or fmap.data.size == 0:
        raise ShapeError(f"grid_sample needs a non-empty (N, C, h, w) map, got {fmap.shape}")
    n, c, h, w = fmap.shape
    coords = np.asarray(coords, dtype=np.float64).reshape(n, 2)
    idx, wts = bilinear_weights(h, w, coords)
    rows = np.arange(n)
    out = np.zeros((n, c), dtype=np.float64)
    for (vi, ui), wt in zip(idx, wts):
        out += fmap.data[rows, :, vi, ui] * wt[:, None]

    def backward(g):
        full = np.zeros_like(fmap.data)
        for (vi, ui), wt in zip(idx, wts):
            np.add.at(full, (rows, slice(None), vi, ui), g * wt[:, None].astype(g.dtype))
        _accum(fmap, full)

    return _result(out.astype(fmap.dtype), (fmap,), backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    return mean(reshape(x, (n, c, h // k, k, w // k, k)), axis=(3, 5))


def max_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: {h}x{w} not divisible by {k}")
    blocks = transpose(reshape(x, (n, c, h // k, k, w // k, k)), (0, 1, 2, 4, 3, 5))
    return tmax(reshape(blocks, (n, c, h // k, w // k, k * k)), axis=-1)


def patchify(x: Tensor, p: int) -> Tensor:
    """(N, C, H, W) -> (N, (H/p)*(W/p), C*p*p), patches in row-major order."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"patchify: {h}x{w} not divisible by patch size {p}")
    t = reshape(x, (n, c, h // p, p, w // p, p))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    return reshape(t, (n, (h // p) * (w // p), c * p * p))


def where_mask(x: Tensor, keep: np.ndarray, fill: float = -np.inf) -> Tensor:
    """Replace entries where ``keep`` is False by a constant ``fill``."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out = np.where(keep, x.data, np.asarray(fill, dtype=x.dtype))

    def backward(g):
        _accum(x, g * keep)

    return _result(out, (x,), backward)
