"""Mixture-of-experts feed-forward with one router per skill.

Each skill owns a linear router and a mixing logit. A token is sent to the
``top_k`` experts with the highest router probability (ties go to the lower
expert index); the kept probabilities are used as weights as-is, without
renormalizing. The routed output is blended with the mean of the shared
experts by sigmoid(mixing logit).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Linear, Module
from .tensor import Parameter, Tensor


class UnknownSkillError(KeyError):
    pass


@dataclass
class RoutingRecord:
    """Routing decisions of one layer for the tokens of one skill."""

    soft: Tensor          # (N, E) router softmax, differentiable
    hard: np.ndarray      # (N, E) 0/1 indicators of selected experts
    skill: str
    layer: int = 0

    @property
    def n(self) -> int:
        return self.hard.shape[0]

    @property
    def load_soft(self) -> np.ndarray:
        return self.soft.data.mean(axis=0)

    @property
    def load_hard(self) -> np.ndarray:
        return self.hard.mean(axis=0)


def top_k(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties favor lower indices."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def aux_loss(record: RoutingRecord, tau: float) -> Tensor:
    """Load-balancing penalty max(0, (sum_e P_e F_e - tau) / (E - 1))."""
    n, e = record.hard.shape
    if n == 0:
        raise ValueError("aux_loss needs at least one routed token")
    if e < 2:
        raise ValueError("aux_loss needs at least two experts")
    p = T.mean(record.soft, axis=0)
    f = record.hard.mean(axis=0).astype(record.soft.dtype)
    return T.relu((T.tsum(p * f) - tau) * (1.0 / (e - 1)))


class MoEFeedForward(Module):
    def __init__(self, rng: np.random.Generator, d: int, hidden: int, experts: int,
                 top_k: int, shared: int, skills, layer: int = 0):
        if not 1 <= top_k <= experts:
            raise ValueError(f"top_k={top_k} outside [1, {experts}]")
        self.experts = [MLP(rng, d, hidden, d) for _ in range(experts)]
        self.shared = [MLP(rng, d, hidden, d) for _ in range(shared)]
        self.routers = {s: Linear(rng, d, experts) for s in skills}
        self.mix_logits = {s: Parameter(np.zeros(1)) for s in skills}
        self.k = top_k
        self.layer = layer
        self.expert_calls = 0     # running count of (token, routed expert) evaluations

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def route(self, x: Tensor, skill: str):
        """Router softmax, selected expert indices and the routing record for ``x`` (N, d)."""
        if skill not in self.routers:
            raise UnknownSkillError(f"no router registered for skill {skill!r}")
        probs = T.softmax(self.routers[skill](x), axis=-1)
        sel = top_k(probs.data, self.k)
        hard = np.zeros(probs.shape, dtype=np.float64)
        np.put_along_axis(hard, sel, 1.0, axis=-1)
        return probs, sel, RoutingRecord(probs, hard, skill, self.layer)

    def alpha(self, skill: str) -> float:
        return float(1.0 / (1.0 + np.exp(-self.mix_logits[skill].data[0])))

    def _forward_skill(self, x: Tensor, skill: str):
        n, d = x.shape
        probs, sel, record = self.route(x, skill)
        y_router = None
        for e, expert in enumerate(self.experts):
            rows = np.nonzero((sel == e).any(axis=-1))[0]
            if len(rows) == 0:
                continue
            self.expert_calls += len(rows)
            w = probs[rows, e:e + 1]
            # one (1, d) product per token: BLAS rounding then cannot depend on how
            # many tokens share the expert, so later tokens never perturb earlier ones
            xe = x[rows].reshape(len(rows), 1, d)
            ye = T.scatter_rows(expert(xe).reshape(len(rows), d) * w, rows, n)
            y_router = ye if y_router is None else y_router + ye
        if self.shared:
            y_se = self.shared[0](x)
            for s in self.shared[1:]:
                y_se = y_se + s(x)
            y_se = y_se * (1.0 / len(self.shared))
            a = T.sigmoid(self.mix_logits[skill])
            out = y_router * a + y_se * (1.0 - a)
        else:
            out = y_router
        return out, record

    def __call__(self, x: Tensor, skills) -> tuple[Tensor, list[RoutingRecord]]:
        """``x`` (N, d) tokens; ``skills`` a length-N sequence of skill names."""
        skills = np.asarray(skills)
        if skills.shape != (x.shape[0],):
            raise T.ShapeError(f"need one skill per token: {skills.shape} vs {x.shape}")
        present = list(dict.fromkeys(skills.tolist()))
        if len(present) == 1:
            out, rec = self._forward_skill(x, present[0])
            return out, [rec]
        out, records = None, []
        for s in present:
            rows = np.nonzero(skills == s)[0]
            ys, rec = self._forward_skill(x[rows], s)
            part = T.scatter_rows(ys, rows, x.shape[0])
            out = part if out is None else out + part
            records.append(rec)
        return out, records
