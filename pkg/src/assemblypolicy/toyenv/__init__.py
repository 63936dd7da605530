"""Synthetic tabletop assembly environment."""
from .skills import SKILLS, VOCAB, tokenize

__all__ = ["SKILLS", "VOCAB", "tokenize"]
