"""Adam-family optimizer with linear warm-up and optional LAMB trust ratio."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class OptimizerState:
    lr: float = 5e-5
    warmup_steps: int = 2000
    trust_ratio: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    decay_steps: int = 0              # cosine decay to zero over this many post-warm-up steps; 0 disables
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_lr(self) -> float:
        lr = self.lr
        if self.warmup_steps > 0:
            lr *= min(1.0, self.step / self.warmup_steps)
        if self.decay_steps > 0 and self.step > self.warmup_steps:
            progress = min(1.0, (self.step - self.warmup_steps) / self.decay_steps)
            lr *= 0.5 * (1.0 + np.cos(np.pi * progress))
        return float(lr)


def clamp_warmup(warmup_steps: int, total_steps: int) -> int:
    """Warm-up never exceeds a tenth of the run."""
    return int(min(warmup_steps, max(total_steps // 10, 0)))


class Lamb:
    """Adam moments; with ``trust_ratio`` each tensor's step is rescaled by
    ``||param|| / ||update||`` clipped to [0.01, 10]."""

    def __init__(self, params: dict[str, Parameter], state: OptimizerState | None = None):
        self.params = params
        self.state = state or OptimizerState()

    def step(self) -> float:
        st = self.state
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {name!r} at step {st.step}")
        lr = st.effective_lr()
        t = st.step + 1
        bc1 = 1.0 - st.beta1 ** t
        bc2 = 1.0 - st.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = st.m.get(name)
            if m is None:
                m = st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            if lr == 0.0:
                continue
            update = (m / bc1) / (np.sqrt(v / bc2) + st.eps)
            if st.weight_decay:
                update = update + st.weight_decay * p.data
            if st.trust_ratio:
                w_norm = float(np.linalg.norm(p.data))
                u_norm = float(np.linalg.norm(update))
                ratio = 1.0 if w_norm == 0.0 or u_norm == 0.0 else float(np.clip(w_norm / u_norm, 0.01, 10.0))
            else:
                ratio = 1.0
            p.data -= (lr * ratio * update).astype(p.data.dtype)
        st.step += 1
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"m.{name}"] = self.state.m[name]
                out[f"v.{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for name in self.params:
            if f"m.{name}" in arrays:
                self.state.m[name] = np.array(arrays[f"m.{name}"])
                self.state.v[name] = np.array(arrays[f"v.{name}"])
        self.state.step = step
