"""Chunking causal MoE transformer: action-token decoder over fused scene features.

Token classes are a position query, four quaternion components and the
gripper state. Discrete tokens are grouped into chunks (the four rotation
tokens, then the gripper); each chunk's distribution is read from the
decoder state at the position just before the chunk, so a chunk only ever
conditions on earlier chunks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, MoEConfig
from .moe import MoEFeedForward, RoutingRecord
from .nn import Attention, ConvTranspose2d, LayerNorm, Linear, Module, normal
from .tensor import Parameter, Tensor

POS_QUERY, ROT_W, ROT_X, ROT_Y, ROT_Z, GRIPPER = range(6)
TOKEN_CLASSES = ("position-query", "rot-w", "rot-x", "rot-y", "rot-z", "gripper")
SENTINEL = -1
DISCRETE_TYPES = (ROT_W, ROT_X, ROT_Y, ROT_Z, GRIPPER)
CHUNK_IDS = (1, 1, 1, 1, 2)
PROMPT_LEN = 2


@dataclass
class ActionTokenSequence:
    type_ids: np.ndarray    # (K',) token classes, may include the position query
    values: np.ndarray      # (K',) bin index or SENTINEL
    chunk_ids: np.ndarray   # (K',) 0 for the query, 1..M for discrete tokens

    def __post_init__(self):
        self.type_ids = np.asarray(self.type_ids, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.int64)
        self.chunk_ids = np.asarray(self.chunk_ids, dtype=np.int64)
        if np.any(np.diff(self.chunk_ids) < 0):
            raise ValueError("chunk ids must be nondecreasing")

    @property
    def discrete(self) -> np.ndarray:
        return self.values[self.type_ids != POS_QUERY]

    def __len__(self) -> int:
        return len(self.type_ids)


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def class_sizes(bins: int) -> dict[int, int]:
    return {ROT_W: bins, ROT_X: bins, ROT_Y: bins, ROT_Z: bins, GRIPPER: 2}


class DecoderBlock(Module):
    """Pre-norm causal self-attention with relative bias, cross-attention, MoE."""

    def __init__(self, rng, cfg: ModelConfig, moe: MoEConfig, skills, layer: int):
        d = cfg.joint
        self.ln_self = LayerNorm(d)
        self.self_attn = Attention(rng, d, cfg.heads)
        self.rel_bias = Parameter(np.zeros(cfg.max_len))
        self.ln_cross = LayerNorm(d)
        self.ln_scene = LayerNorm(d)
        self.cross_attn = Attention(rng, d, cfg.heads)
        self.ln_ff = LayerNorm(d)
        self.moe = MoEFeedForward(rng, d, moe.hidden, moe.experts, moe.top_k, moe.shared, skills, layer)
        self.max_len = cfg.max_len

    def relative_bias(self, t: int) -> Tensor:
        i = np.arange(t)[:, None]
        j = np.arange(t)[None, :]
        idx = np.clip(i - j, 0, self.max_len - 1)
        return self.rel_bias[idx]

    def __call__(self, h: Tensor, scene: Tensor, skills: np.ndarray):
        b, t, d = h.shape
        if t > self.max_len:
            raise T.ShapeError(f"sequence of {t} exceeds max_len {self.max_len}")
        causal = np.tril(np.ones((t, t), dtype=bool))
        h = h + self.self_attn(self.ln_self(h), bias=self.relative_bias(t), keep=causal)
        h = h + self.cross_attn(self.ln_cross(h), context=self.ln_scene(scene))
        ff, records = self.moe(self.ln_ff(h).reshape(b * t, d), np.repeat(skills, t))
        return h + ff.reshape(b, t, d), records


class HeatmapHead(Module):
    """Stride-2 transposed convolutions halving width each stage, then a 1x1 conv."""

    def __init__(self, rng, cfg: ModelConfig):
        stages = int(np.log2(cfg.patch))
        widths = [cfg.joint] + [cfg.channels // (2 ** i) for i in range(stages)]
        self.ups = [ConvTranspose2d(rng, widths[i], widths[i + 1]) for i in range(stages)]
        self.proj = Linear(rng, widths[-1], 1)

    def __call__(self, m: Tensor) -> Tensor:
        x = m
        for up in self.ups:
            x = T.gelu(up(x))
        x = T.transpose(x, (0, 2, 3, 1))
        return self.proj(x)[..., 0]


class CCMT(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, moe: MoEConfig, skills):
        d = cfg.joint
        self.cfg = cfg
        self.skills = list(skills)
        self.type_embed = Parameter(rng.standard_normal((len(TOKEN_CLASSES), d)))
        sizes = class_sizes(cfg.bins)
        self.value_offsets = {}
        off = 0
        for cls in DISCRETE_TYPES:
            self.value_offsets[cls] = off
            off += sizes[cls]
        self.value_embed = normal(rng, (off, d))
        self.pos_table = sinusoidal_table(cfg.max_len, d)
        self.blocks = [DecoderBlock(rng, cfg, moe, skills, layer=i) for i in range(cfg.depth)]
        self.ln_out = LayerNorm(d)
        self.head = HeatmapHead(rng, cfg)
        self.cls_heads = {"chunk1": Linear(rng, d, 4 * cfg.bins), "chunk2": Linear(rng, d, 2)}

    # -- embeddings -------------------------------------------------------
    def embed_tokens(self, type_ids: np.ndarray, values: np.ndarray, start: int = 0) -> Tensor:
        """type_ids/values (B, T) -> (B, T, 2C). Sentinel values embed as zero."""
        type_ids = np.asarray(type_ids, dtype=np.int64)
        values = np.asarray(values, dtype=np.int64)
        b, t = type_ids.shape
        if start + t > self.cfg.max_len:
            raise T.ShapeError(f"sequence of {start + t} exceeds max_len {self.cfg.max_len}")
        sizes = class_sizes(self.cfg.bins)
        rows = np.zeros_like(values)
        known = values != SENTINEL
        for cls, off in self.value_offsets.items():
            sel = known & (type_ids == cls)
            if np.any(values[sel] >= sizes[cls]) or np.any(values[sel] < 0):
                raise ValueError(f"value index out of range for {TOKEN_CLASSES[cls]}")
            rows[sel] = values[sel] + off
        if np.any(known & (type_ids == POS_QUERY)):
            raise ValueError("the position query carries no value")
        val = T.embedding(self.value_embed, rows) * known[..., None].astype(self.value_embed.dtype)
        pos = self.pos_table[start:start + t].astype(self.value_embed.dtype)
        return val + T.embedding(self.type_embed, type_ids) + pos

    # -- decoder ----------------------------------------------------------
    def decode(self, h: Tensor, z_fusion: Tensor, skills) -> tuple[Tensor, list[RoutingRecord]]:
        """Run the block stack; z_fusion (B, V, 2C, h, w) is flattened to scene tokens."""
        b, v, d, gh, gw = z_fusion.shape
        scene = T.transpose(z_fusion, (0, 1, 3, 4, 2)).reshape(b, v * gh * gw, d)
        skills = np.asarray(skills)
        records: list[RoutingRecord] = []
        for blk in self.blocks:
            h, recs = blk(h, scene, skills)
            records.extend(recs)
        return self.ln_out(h), records

    def query(self, z_fusion: Tensor, skills) -> tuple[Tensor, list[RoutingRecord]]:
        """Intent query from a lone position-query token: (B, 2C)."""
        b = z_fusion.shape[0]
        h0 = self.embed_tokens(np.full((b, 1), POS_QUERY), np.full((b, 1), SENTINEL))
        h, rec = self.decode(h0, z_fusion, skills)
        return h[:, 0], rec

    def predict_heatmaps(self, q: Tensor, z_fusion: Tensor) -> Tensor:
        """Softmax heatmaps (B, V, H, W) from q (B, 2C) correlated with each view."""
        b, v, d, gh, gw = z_fusion.shape
        m = z_fusion * q.reshape(b, 1, d, 1, 1)
        logits = self.head(m.reshape(b * v, d, gh, gw))
        hh, ww = logits.shape[-2:]
        probs = T.softmax(logits.reshape(b, v, hh * ww), axis=-1)
        return probs.reshape(b, v, hh, ww)

    def chunk_logits(self, prompt: Tensor, values: np.ndarray, z_fusion: Tensor, skills):
        """Teacher-forced pass over [prompt, query, discrete tokens...].

        ``values`` (B, n) holds the first n discrete token values (n in 0..5).
        Returns per-chunk logits for every chunk whose reading position is
        present: chunk 1 -> (B, 4, bins), chunk 2 -> (B, 2).
        """
        b = prompt.shape[0]
        values = np.asarray(values, dtype=np.int64).reshape(b, -1)
        n = values.shape[1]
        types = np.array([POS_QUERY] + list(DISCRETE_TYPES[:n]))
        vals = np.concatenate([np.full((b, 1), SENTINEL), values], axis=1)
        emb = self.embed_tokens(np.broadcast_to(types, (b, n + 1)), vals, start=PROMPT_LEN)
        h, records = self.decode(T.concat([prompt, emb], axis=1), z_fusion, skills)
        out = {}
        q_pos = PROMPT_LEN
        out[1] = self.cls_heads["chunk1"](h[:, q_pos]).reshape(b, 4, self.cfg.bins)
        if n >= 4:
            out[2] = self.cls_heads["chunk2"](h[:, q_pos + 4])
        return out, records

    def classify_chunks(self, h: Tensor, chunk: int) -> Tensor:
        if chunk == 1:
            return T.softmax(self.cls_heads["chunk1"](h).reshape(h.shape[0], 4, self.cfg.bins), axis=-1)
        if chunk == 2:
            return T.softmax(self.cls_heads["chunk2"](h), axis=-1)
        raise KeyError(f"no classification head registered for chunk {chunk}")
