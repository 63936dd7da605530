"""Action commands and their chunked token form."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotations
from .ccmt import CHUNK_IDS, DISCRETE_TYPES, ActionTokenSequence

OPEN, CLOSE = 0, 1


@dataclass
class ActionCommand:
    p: np.ndarray   # position, meters, base frame
    r: np.ndarray   # unit quaternion (w, x, y, z), w >= 0
    g: int          # OPEN or CLOSE

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.r = rotations.canonical(self.r)
        self.g = int(self.g)
        if self.g not in (OPEN, CLOSE):
            raise ValueError(f"gripper state must be 0 or 1, got {self.g}")

    def to_dict(self) -> dict:
        return {"p": self.p.tolist(), "r": self.r.tolist(), "g": self.g}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionCommand":
        return cls(np.array(d["p"]), np.array(d["r"]), d["g"])


def quantize(c, bins: int) -> np.ndarray:
    """Uniform bins over [-1, 1]: floor((c + 1) / 2 * bins), clamped to [0, bins - 1]."""
    idx = np.floor((np.asarray(c, dtype=np.float64) + 1.0) / 2.0 * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def bin_centers(idx, bins: int) -> np.ndarray:
    return -1.0 + (2.0 * np.asarray(idx, dtype=np.float64) + 1.0) / bins


def discretize_action(a: ActionCommand, bins: int = 32) -> ActionTokenSequence:
    """Four rotation tokens (chunk 1) and the gripper token (chunk 2)."""
    r = rotations.canonical(a.r)
    values = np.concatenate([quantize(r, bins), [a.g]])
    return ActionTokenSequence(np.array(DISCRETE_TYPES), values, np.array(CHUNK_IDS))


def dediscretize_action(seq: ActionTokenSequence, p, bins: int = 32) -> ActionCommand:
    vals = seq.discrete
    q = bin_centers(vals[:4], bins)
    if np.linalg.norm(q) == 0:
        raise ValueError("reconstructed quaternion has zero norm")
    return ActionCommand(np.asarray(p, dtype=np.float64), rotations.canonical(q), int(vals[4]))


def tokens_from_values(values) -> ActionTokenSequence:
    return ActionTokenSequence(np.array(DISCRETE_TYPES), np.asarray(values), np.array(CHUNK_IDS))
