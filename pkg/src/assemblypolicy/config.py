"""Experiment configuration: strict JSON schema with explicit defaults.

Unknown keys are rejected at every level so a typo never silently falls back
to a default. ``config_hash`` covers the whole config; ``env_hash`` covers
only the fields that determine a generated demo dataset.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64          # H = W of virtual views
    patch: int = 8                # P
    channels: int = 32            # C; joint width is 2C
    d_attn: int = 64
    heads: int = 4
    depth: int = 2                # decoder blocks per CCMT instance
    bins: int = 32                # rotation bins per quaternion component
    instr_len: int = 8            # L
    vocab_size: int = 64
    zoom: float = 4.0             # alpha
    sigma: float = 1.5            # ground-truth Gaussian, pixels
    max_len: int = 16             # decoder positional tables

    @property
    def joint(self) -> int:
        return 2 * self.channels


@dataclass
class MoEConfig:
    experts: int = 4
    top_k: int = 1
    shared: int = 1
    hidden: int = 128
    tau: float | None = None      # None means 1 / experts
    lambda_aux: float = 0.01

    @property
    def threshold(self) -> float:
        return 1.0 / self.experts if self.tau is None else self.tau


@dataclass
class TrainConfig:
    lr: float = 5e-5
    warmup_steps: int = 2000
    trust_ratio: bool = True
    cosine_decay: bool = True
    epochs: int = 8
    batch_size: int = 36
    seed: int = 0
    lambda_coarse: float = 1.0
    lambda_fine: float = 1.0
    lambda_ar: float = 1.0
    augment: bool = True
    augment_translate: float = 0.02   # meters, uniform per axis
    augment_yaw_deg: float = 10.0
    crop_jitter: float = 0.02         # meters, uniform per axis around the ground-truth crop center


@dataclass
class EnvConfig:
    skills: list[str] = field(default_factory=lambda: ["place-pad-red"])
    cameras: int = 3
    camera_size: int = 128
    workspace: list[list[float]] = field(default_factory=lambda: [[0.16, -0.32, -0.02], [0.80, 0.32, 0.62]])
    demos_per_skill: int = 96
    max_steps: int = 10


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)

    def validate(self) -> "ExperimentConfig":
        from .toyenv.skills import SKILLS

        m, e, t, env = self.model, self.moe, self.train, self.env
        for name, val in [("image_size", m.image_size), ("patch", m.patch), ("channels", m.channels),
                          ("d_attn", m.d_attn), ("heads", m.heads), ("depth", m.depth), ("bins", m.bins),
                          ("instr_len", m.instr_len), ("vocab_size", m.vocab_size),
                          ("experts", e.experts), ("top_k", e.top_k), ("hidden", e.hidden),
                          ("epochs", t.epochs), ("batch_size", t.batch_size),
                          ("cameras", env.cameras), ("camera_size", env.camera_size),
                          ("max_steps", env.max_steps)]:
            if val <= 0:
                raise ConfigError(f"{name} must be positive, got {val}")
        if m.image_size % m.patch:
            raise ConfigError(f"image_size {m.image_size} not divisible by patch {m.patch}")
        if m.patch < 2 or m.patch & (m.patch - 1):
            raise ConfigError(f"patch must be a power of two >= 2, got {m.patch}")
        if m.d_attn % m.heads or m.joint % m.heads:
            raise ConfigError("attention widths must divide evenly into heads")
        if m.channels % (m.patch // 2):
            raise ConfigError("channels must be divisible by patch / 2 (heatmap head halves width per stage)")
        if m.zoom <= 1:
            raise ConfigError("zoom must exceed 1")
        if not 1 <= e.top_k <= e.experts:
            raise ConfigError(f"top_k must be in [1, {e.experts}]")
        if e.experts < 2:
            raise ConfigError("need at least two routed experts")
        if e.shared < 0:
            raise ConfigError("shared expert count must be >= 0")
        if not 0 < e.threshold < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if t.lr <= 0 or t.warmup_steps < 0:
            raise ConfigError("lr must be positive and warm-up non-negative")
        if not env.skills:
            raise ConfigError("at least one skill is required")
        unknown = [s for s in env.skills if s not in SKILLS]
        if unknown:
            raise ConfigError(f"unregistered skills: {unknown}")
        if len(set(env.skills)) != len(env.skills):
            raise ConfigError("duplicate skills")
        if len(env.workspace) != 2 or any(len(c) != 3 for c in env.workspace):
            raise ConfigError("workspace must be [[x, y, z], [x, y, z]]")
        if any(hi <= lo for lo, hi in zip(*env.workspace)):
            raise ConfigError("workspace box is degenerate")
        if env.cameras not in (3, 4):
            raise ConfigError("cameras must be 3 or 4")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)


_SECTIONS = {"model": ModelConfig, "moe": MoEConfig, "train": TrainConfig, "env": EnvConfig}


def from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        sub = d.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"section {name!r} must be an object")
        allowed = {f.name for f in dataclasses.fields(cls)}
        bad = set(sub) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
        parts[name] = cls(**sub)
    return ExperimentConfig(**parts).validate()


def load(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def config_hash(cfg: ExperimentConfig) -> str:
    return _digest(cfg.to_dict())


def env_hash(cfg: ExperimentConfig) -> str:
    env = dataclasses.asdict(cfg.env)
    env.pop("max_steps")
    env.pop("skills")
    env.pop("demos_per_skill")
    return _digest(env)


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# Desk-scale recipes. ``full`` keeps the full-size optimizer defaults; the
# others shorten warm-up and raise the learning rate so that a few hundred
# steps suffice.
_DESK_TRAIN = {"lr": 3e-3, "warmup_steps": 100, "trust_ratio": False, "batch_size": 8}

PRESETS: dict[str, dict] = {
    "full": {},
    "single-skill": {"train": _DESK_TRAIN, "env": {"skills": ["place-pad-red"]}},
    "multi-skill-joint": {"train": _DESK_TRAIN, "env": {"skills": ["place-pad-red", "place-pad-blue"]}},
    "cross-skill": {"train": _DESK_TRAIN, "env": {"skills": ["place-pad-red", "seat-socket-green"]}},
    "tiny": {
        "model": {"image_size": 32, "patch": 4},
        "moe": {"hidden": 64},
        "train": {**_DESK_TRAIN, "lr": 3e-3, "augment": False, "crop_jitter": 0.0},
        "env": {"camera_size": 96, "demos_per_skill": 8},
    },
}


def preset(name: str, overrides: dict | None = None) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = merge(ExperimentConfig().to_dict(), PRESETS[name])
    if overrides:
        d = merge(d, overrides)
    return from_dict(d)
