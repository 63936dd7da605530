"""Vision, language and proprioception encoders with two-stage attention fusion.

Patch tokens from each rendered view are concatenated channel-wise with the
broadcast proprioception embedding, offset by a learned positional table, and
prefixed with language tokens. After projection to the attention width, the
visual rows first attend only within their own view; the language rows then
rejoin for one global self-attention pass, are dropped again, and the
remaining rows are projected back and reshaped view-wise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rotations
from . import tensor as T
from .config import ModelConfig
from .geometry import CameraModel
from .nn import MLP, Attention, Linear, Module, normal
from .tensor import Tensor

PAD_ID = 0
UNK_ID = 1
IMAGE_CHANNELS = 4  # RGB + validity mask
PROPRIO_DIM = 8


@dataclass
class CameraFrame:
    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W) meters, 0 = invalid
    camera: "CameraModel"


@dataclass
class Observation:
    frames: list[CameraFrame]
    tokens: np.ndarray                 # (L,) instruction ids, PAD_ID padded
    tcp_position: np.ndarray           # (3,) meters
    tcp_orientation: np.ndarray        # (4,) unit quaternion, w >= 0
    gripper_openness: float            # 1 open, 0 closed
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("an observation needs at least one camera")
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.tcp_orientation = rotations.canonical(self.tcp_orientation)

    def proprio(self) -> np.ndarray:
        return np.concatenate([self.tcp_position, self.tcp_orientation, [self.gripper_openness]])


class FusionEncoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, views: int = 3):
        c, p = cfg.channels, cfg.patch
        if cfg.image_size % p:
            raise ValueError(f"image size {cfg.image_size} not divisible by patch {p}")
        self.cfg = cfg
        self.views = views
        self.grid = cfg.image_size // p
        n_tokens = views * self.grid * self.grid
        self.patch_embed = Linear(rng, IMAGE_CHANNELS * p * p, c)
        self.lang_table = normal(rng, (cfg.vocab_size, cfg.joint))
        self.lang_proj = Linear(rng, cfg.joint, cfg.joint)
        self.proprio = MLP(rng, PROPRIO_DIM, c, c)
        self.pos = normal(rng, (n_tokens, cfg.joint))
        self.in_proj = Linear(rng, cfg.joint, cfg.d_attn)
        self.local_attn = Attention(rng, cfg.d_attn, cfg.heads)
        self.global_attn = Attention(rng, cfg.d_attn, cfg.heads)
        self.out_proj = Linear(rng, cfg.d_attn, cfg.joint)

    @property
    def patches_per_view(self) -> int:
        return self.grid * self.grid

    def encode_modalities(self, images: Tensor, tokens: np.ndarray, proprio: Tensor):
        """images (B, V, 4, H, W), tokens (B, L) ints, proprio (B, 8).

        Returns F_vis (B, V*Np, C), F_lang (B, L, 2C) with padded rows zeroed,
        and F_pro (B, C).
        """
        b, v, ch, h, w = images.shape
        if v != self.views:
            raise T.ShapeError(f"expected {self.views} views, got {v}")
        patches = T.patchify(images.reshape(b * v, ch, h, w), self.cfg.patch)
        f_vis = self.patch_embed(patches).reshape(b, v * self.patches_per_view, self.cfg.channels)
        tokens = np.asarray(tokens, dtype=np.int64)
        valid = (tokens != PAD_ID).astype(images.dtype)[..., None]
        f_lang = self.lang_proj(T.embedding(self.lang_table, tokens)) * valid
        f_pro = self.proprio(proprio)
        return f_vis, f_lang, f_pro

    def build_joint_sequence(self, f_vis: Tensor, f_pro: Tensor, f_lang: Tensor) -> Tensor:
        b, n, c = f_vis.shape
        pro = T.broadcast_to(f_pro.reshape(b, 1, c), (b, n, c))
        f_vp = T.concat([f_vis, pro], axis=-1) + self.pos
        return T.concat([f_lang, f_vp], axis=1)

    def local_view_attention(self, f_vp: Tensor) -> Tensor:
        """Per-view self-attention with residual; f_vp is (B, V*Np, d_attn)."""
        b, n, d = f_vp.shape
        per_view = f_vp.reshape(b * self.views, self.patches_per_view, d)
        out = per_view + self.local_attn(per_view)
        return out.reshape(b, n, d)

    def global_fusion(self, f_vp_hat: Tensor, f_lang: Tensor, tokens: np.ndarray) -> Tensor:
        """Joint attention over language + all views, then drop language rows and reshape."""
        b, n, d = f_vp_hat.shape
        seq_len = f_lang.shape[1]
        z = T.concat([f_lang, f_vp_hat], axis=1)
        keep = np.ones((b, 1, 1, seq_len + n), dtype=bool)
        keep[:, 0, 0, :seq_len] = np.asarray(tokens) != PAD_ID
        z = z + self.global_attn(z, keep=keep)
        out = self.out_proj(z[:, seq_len:])
        g = self.grid
        out = out.reshape(b, self.views, g, g, self.cfg.joint)
        return T.transpose(out, (0, 1, 4, 2, 3))

    def __call__(self, images: Tensor, tokens: np.ndarray, proprio: Tensor) -> Tensor:
        """Fused scene feature (B, V, 2C, H/P, W/P)."""
        f_vis, f_lang, f_pro = self.encode_modalities(images, tokens, proprio)
        z_seq = self.build_joint_sequence(f_vis, f_pro, f_lang)
        z = self.in_proj(z_seq)
        seq_len = f_lang.shape[1]
        lang, vp = z[:, :seq_len], z[:, seq_len:]
        vp_hat = self.local_view_attention(vp)
        return self.global_fusion(vp_hat, lang, tokens)
