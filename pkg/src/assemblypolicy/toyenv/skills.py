"""Toy assembly skills and the fixed instruction vocabulary.

Three categories with tightening goal tolerance: placement on a pad,
seating on a socket, and peg insertion. Each category has two skills that
differ in the target part and goal slot.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..fusion import PAD_ID, UNK_ID


@dataclass(frozen=True)
class PartSpec:
    shape: str                       # box | cylinder | sphere
    size: tuple[float, float, float]  # full extents (x, y, z), meters
    color: tuple[float, float, float]

    @property
    def height(self) -> float:
        return self.size[2]


@dataclass(frozen=True)
class Skill:
    name: str
    category: str                    # placement | seating | insertion
    part: PartSpec
    slot: tuple[float, float]        # goal xy offset from the fixture center
    depth: float                     # how far the part sinks below the fixture top
    tolerance: float                 # goal position tolerance, meters
    phrases: tuple[str, ...]


RED = (0.85, 0.15, 0.12)
BLUE = (0.15, 0.30, 0.85)
GREEN = (0.15, 0.70, 0.25)
YELLOW = (0.90, 0.80, 0.15)
CYAN = (0.10, 0.75, 0.80)
MAGENTA = (0.80, 0.20, 0.70)

SKILLS: dict[str, Skill] = {s.name: s for s in [
    Skill("place-pad-red", "placement", PartSpec("box", (0.04, 0.04, 0.04), RED), (-0.05, -0.05), 0.0, 0.02,
          ("place the red block on the pad", "put the red block onto the pad", "move red block to pad")),
    Skill("place-pad-blue", "placement", PartSpec("cylinder", (0.04, 0.04, 0.045), BLUE), (0.05, -0.05), 0.0, 0.02,
          ("place the blue cylinder on the pad", "put the blue cylinder onto the pad", "move blue cylinder to pad")),
    Skill("seat-socket-green", "seating", PartSpec("box", (0.03, 0.03, 0.05), GREEN), (-0.05, 0.05), 0.01, 0.01,
          ("seat the green block in the socket", "put the green block into the socket", "seat green block")),
    Skill("seat-socket-yellow", "seating", PartSpec("cylinder", (0.035, 0.035, 0.05), YELLOW), (0.05, 0.05), 0.01, 0.01,
          ("seat the yellow cylinder in the socket", "put the yellow cylinder into the socket", "seat yellow cylinder")),
    Skill("insert-peg-cyan", "insertion", PartSpec("cylinder", (0.024, 0.024, 0.06), CYAN), (0.0, 0.0), 0.025, 0.005,
          ("insert the cyan peg into the hole", "put the cyan peg into the hole", "insert cyan peg")),
    Skill("insert-peg-magenta", "insertion", PartSpec("box", (0.024, 0.024, 0.06), MAGENTA), (0.0, 0.075), 0.025, 0.005,
          ("insert the magenta peg into the hole", "put the magenta peg into the hole", "insert magenta peg")),
]}

SPECIAL = ["<pad>", "<unk>"]


def _build_vocab() -> list[str]:
    words: list[str] = []
    for s in SKILLS.values():
        for phrase in s.phrases:
            for w in phrase.split():
                if w not in words:
                    words.append(w)
    return SPECIAL + sorted(words)


VOCAB: list[str] = _build_vocab()
assert VOCAB.index("<pad>") == PAD_ID and VOCAB.index("<unk>") == UNK_ID


def tokenize(text: str, length: int, vocab: list[str] | None = None) -> np.ndarray:
    """Whitespace tokenization against the vocabulary, truncated or padded to ``length``."""
    vocab = VOCAB if vocab is None else vocab
    index = {w: i for i, w in enumerate(vocab)}
    ids = [index.get(w, UNK_ID) for w in text.lower().split()][:length]
    return np.array(ids + [PAD_ID] * (length - len(ids)), dtype=np.int64)


def write_vocab(path, vocab: list[str] | None = None) -> None:
    Path(path).write_text("\n".join(VOCAB if vocab is None else vocab) + "\n")


def read_vocab(path) -> list[str]:
    return Path(path).read_text().splitlines()
