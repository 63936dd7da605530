"""Shared fixtures for the test suite: the differentiable-op table and a
micro two-stage model used by the gradient and causality checks."""
from __future__ import annotations

import numpy as np

from assemblypolicy import tensor as T
from assemblypolicy.tensor import Parameter


def P(rng, *shape, scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale, dtype=np.float64)


def _case(build):
    def make(rng):
        inputs, fn = build(rng)
        probe = fn()
        w = rng.standard_normal(probe.shape)
        return (lambda: T.tsum(fn() * w)), inputs
    return make


def _dims(rng, lo=2, hi=5, n=2):
    return [int(d) for d in rng.integers(lo, hi + 1, size=n)]


def _add(rng):
    a, b = P(rng, *_dims(rng)), None
    b = P(rng, a.shape[1])
    return [a, b], lambda: T.add(a, b)


def _sub(rng):
    a = P(rng, *_dims(rng))
    b = P(rng, *a.shape)
    return [a, b], lambda: T.sub(a, b)


def _mul(rng):
    a = P(rng, *_dims(rng))
    b = P(rng, a.shape[0], 1)
    return [a, b], lambda: T.mul(a, b)


def _div(rng):
    a = P(rng, *_dims(rng))
    b = Parameter(rng.uniform(0.5, 2.0, a.shape), dtype=np.float64)
    return [a, b], lambda: T.div(a, b)


def _matmul(rng):
    n, k, m = _dims(rng, n=3)
    a, b = P(rng, 2, n, k), P(rng, k, m)
    return [a, b], lambda: T.matmul(a, b)


def _transpose(rng):
    a = P(rng, *_dims(rng, n=3))
    return [a], lambda: T.transpose(a, (2, 0, 1))


def _reshape(rng):
    a = P(rng, 2, 3, 4)
    return [a], lambda: T.reshape(a, (4, 6))


def _concat(rng):
    a, b = P(rng, 2, 3), P(rng, 2, 4)
    return [a, b], lambda: T.concat([a, b], axis=1)


def _slice(rng):
    a = P(rng, 5, 6)
    return [a], lambda: a[1:4, ::2]


def _exp(rng):
    a = P(rng, *_dims(rng))
    return [a], lambda: T.exp(a)


def _log(rng):
    a = Parameter(rng.uniform(0.5, 3.0, _dims(rng)), dtype=np.float64)
    return [a], lambda: T.log(a)


def _sqrt(rng):
    a = Parameter(rng.uniform(0.5, 3.0, _dims(rng)), dtype=np.float64)
    return [a], lambda: T.sqrt(a)


def _sum(rng):
    a = P(rng, *_dims(rng, n=3))
    return [a], lambda: T.tsum(a, axis=1)


def _mean(rng):
    a = P(rng, *_dims(rng, n=3))
    return [a], lambda: T.mean(a, axis=(0, 2))


def _softmax(rng):
    a = P(rng, *_dims(rng))
    return [a], lambda: T.softmax(a, axis=0)


def _log_softmax(rng):
    a = P(rng, *_dims(rng))
    return [a], lambda: T.log_softmax(a, axis=-1)


def _sigmoid(rng):
    a = P(rng, *_dims(rng))
    return [a], lambda: T.sigmoid(a)


def _tanh(rng):
    a = P(rng, *_dims(rng))
    return [a], lambda: T.tanh(a)


def _relu(rng):
    a = P(rng, *_dims(rng))
    return [a], lambda: T.relu(a)


def _gelu(rng):
    a = P(rng, *_dims(rng))
    return [a], lambda: T.gelu(a)


def _layer_norm(rng):
    n, d = _dims(rng, 2, 6)
    x, g, b = P(rng, n, d), P(rng, d), P(rng, d)
    return [x, g, b], lambda: T.layer_norm(x, g, b)


def _embedding(rng):
    table = P(rng, 6, 4)
    ids = rng.integers(0, 6, size=(3, 2))
    return [table], lambda: T.embedding(table, ids)


def _conv_t(rng):
    x, w, b = P(rng, 2, 3, 3, 3), P(rng, 3, 2, 4, 4), P(rng, 2)
    return [x, w, b], lambda: T.conv_transpose2d(x, w, b, stride=2, padding=1)


def _grid_sample(rng):
    f = P(rng, 3, 2, 4, 5)
    coords = rng.uniform(-0.5, 4.5, size=(3, 2))
    return [f], lambda: T.grid_sample(f, coords)


def _avg_pool(rng):
    x = P(rng, 1, 2, 4, 4)
    return [x], lambda: T.avg_pool2d(x, 2)


def _max_pool(rng):
    x = P(rng, 1, 2, 4, 4)
    return [x], lambda: T.max_pool2d(x, 2)


def _patchify(rng):
    x = P(rng, 1, 2, 4, 4)
    return [x], lambda: T.patchify(x, 2)


def _power(rng):
    a = Parameter(rng.uniform(0.5, 2.0, _dims(rng)), dtype=np.float64)
    return [a], lambda: T.power(a, 1.7)


def _mask(rng):
    a = P(rng, 3, 4)
    keep = rng.random((3, 4)) > 0.3
    return [a], lambda: T.where_mask(a, keep, fill=0.0)


def _scalar_case(build):
    def make(rng):
        inputs, fn = build(rng)
        return fn, inputs
    return make


def _ce(rng):
    logits = P(rng, 4, 5)
    y = rng.integers(0, 5, size=4)
    return [logits], lambda: T.cross_entropy(logits, y)


def _mse(rng):
    a = P(rng, 3, 4)
    b = rng.standard_normal((3, 4))
    return [a], lambda: T.mse(a, b)


OPS = {name: _case(b) for name, b in [
    ("add", _add), ("sub", _sub), ("mul", _mul), ("div", _div), ("matmul", _matmul),
    ("transpose", _transpose), ("reshape", _reshape), ("concat", _concat), ("slice", _slice),
    ("exp", _exp), ("log", _log), ("sqrt", _sqrt), ("power", _power), ("sum", _sum), ("mean", _mean),
    ("softmax", _softmax), ("log_softmax", _log_softmax), ("sigmoid", _sigmoid), ("tanh", _tanh),
    ("relu", _relu), ("gelu", _gelu), ("layer_norm", _layer_norm), ("embedding", _embedding),
    ("conv_transpose2d", _conv_t), ("grid_sample", _grid_sample), ("avg_pool2d", _avg_pool),
    ("max_pool2d", _max_pool), ("patchify", _patchify), ("where_mask", _mask),
]}
OPS.update({"cross_entropy": _scalar_case(_ce), "mse": _scalar_case(_mse)})


def micro_config(**train):
    """C = 8, H = W = 16 two-stage model with two skills."""
    from assemblypolicy import config as C

    return C.preset("tiny", {
        "model": {"image_size": 16, "patch": 4, "channels": 8, "d_attn": 8, "heads": 2, "depth": 2,
                  "bins": 8, "max_len": 12},
        "moe": {"hidden": 8},
        "train": {"augment": False, "crop_jitter": 0.0, **train},
        "env": {"skills": ["place-pad-red", "place-pad-blue"]},
    })


def synthetic_examples(cfg, n: int, rng: np.random.Generator, skill: str | None = None):
    """Random point clouds with in-workspace targets; cheap stand-ins for rendered demos."""
    from assemblypolicy.actions import ActionCommand
    from assemblypolicy.geometry import Box
    from assemblypolicy.pipeline import Example
    from assemblypolicy.rotations import random_unit

    box = Box(*cfg.env.workspace)
    out = []
    for i in range(n):
        target = box.lo + (0.2 + 0.6 * rng.random(3)) * box.size
        pts = np.concatenate([box.lo + rng.random((300, 3)) * box.size,
                              target + 0.03 * rng.standard_normal((200, 3))])
        pts = np.clip(pts, box.lo, box.hi)
        cols = rng.integers(0, 256, size=(len(pts), 3)).astype(np.uint8)
        q = random_unit(rng, 1)[0]
        pro = np.concatenate([target + 0.05 * rng.standard_normal(3), q, [rng.random()]])
        action = ActionCommand(target, random_unit(rng, 1)[0], int(rng.integers(2)))
        sk = skill or cfg.env.skills[i % len(cfg.env.skills)]
        tokens = rng.integers(2, cfg.model.vocab_size, size=cfg.model.instr_len)
        out.append(Example(sk, tokens, pts.astype(np.float32), cols, pro.astype(np.float32), action, i, 0))
    return out
