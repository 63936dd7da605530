"""Two-stage coarse-to-fine policy: training, losses and closed-loop inference.

Stage one renders the workspace-cropped cloud into three orthographic views,
fuses them with the instruction and proprioception, and decodes a lone
position-query token into per-view heatmaps that are triangulated to a coarse
operation point. Stage two crops a zoomed cube around that point, repeats the
fusion on the crop, refines the point, and then decodes the rotation chunk and
the gripper chunk autoregressively from a two-token prompt built from the
refined point.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint, rotations
from . import tensor as T
from .actions import ActionCommand, dediscretize_action, discretize_action, tokens_from_values
from .ccmt import CCMT, ActionTokenSequence
from .config import ExperimentConfig, config_hash, from_dict
from .fusion import FusionEncoder, Observation
from .geometry import (Box, CameraModel, GeometryError, PointCloud, backproject, crop_and_zoom,
                       crop_workspace, gaussian_heatmaps, render_views, triangulate, virtual_views)
from .moe import RoutingRecord, aux_loss
from .nn import Module
from .optim import Lamb, OptimizerState, clamp_warmup
from .tensor import Tensor

log = logging.getLogger(__name__)

N_VIEWS = 3


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

def observation_cloud(obs: Observation, workspace: Box) -> PointCloud:
    """Fuse all camera frames into one base-frame cloud cropped to the workspace."""
    clouds = [backproject(fr.depth, fr.rgb, fr.camera) for fr in obs.frames]
    return crop_workspace(PointCloud.concat(clouds), workspace)


def render_input(pc: PointCloud, views: list[CameraModel]) -> np.ndarray:
    """(V, 4, H, W) network input: RGB plus the splat validity mask."""
    rgb, mask = render_views(pc, views)
    return np.concatenate([np.moveaxis(rgb, -1, 1), mask[:, None].astype(np.float32)], axis=1)


def feature_coords(uv: np.ndarray, patch: int) -> np.ndarray:
    """Image pixel coordinates to feature-map coordinates (both pixel-center based)."""
    return (np.asarray(uv) + 0.5) / patch - 0.5


@dataclass
class Example:
    """One keyframe transition: observation at keyframe k, action of keyframe k + 1."""

    skill: str
    tokens: np.ndarray
    positions: np.ndarray      # (N, 3) float32 cloud
    colors: np.ndarray         # (N, 3) uint8
    proprio: np.ndarray        # (8,)
    action: ActionCommand
    demo: int = 0
    keyframe: int = 0

    def cloud(self) -> PointCloud:
        return PointCloud(self.positions.astype(np.float64), self.colors.astype(np.float32) / 255.0)


def build_examples(demos, workspace: Box) -> list[Example]:
    out = []
    for d, demo in enumerate(demos):
        for k, kf in enumerate(demo.keyframes):
            pc = observation_cloud(kf.observation, workspace)
            out.append(Example(demo.skill, np.asarray(demo.tokens), pc.positions.astype(np.float32),
                               np.round(pc.colors * 255).astype(np.uint8), kf.observation.proprio(),
                               kf.action, d, k))
    return out


def augment(ex: Example, rng: np.random.Generator, center, translate: float, yaw_deg: float):
    """Rigid yaw-plus-translation applied to the cloud, proprioception and label."""
    yaw = np.radians(rng.uniform(-yaw_deg, yaw_deg))
    shift = rng.uniform(-translate, translate, size=3)
    q = rotations.from_axis_angle([0.0, 0.0, 1.0], yaw)
    R = rotations.to_matrix(q)
    center = np.asarray(center, dtype=np.float64)

    def move(p):
        return (np.asarray(p, dtype=np.float64) - center) @ R.T + center + shift

    pc = PointCloud(move(ex.positions), ex.colors.astype(np.float32) / 255.0)
    pro = ex.proprio.copy()
    pro[:3] = move(pro[:3])
    pro[3:7] = rotations.canonical(rotations.multiply(q, pro[3:7]))
    a = ActionCommand(move(ex.action.p), rotations.multiply(q, ex.action.r), ex.action.g)
    return pc, pro, a


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    s1_mse: float
    s2_mse: float
    ar_ce: float
    aux: float
    weights: tuple[float, float, float, float]

    @property
    def total(self) -> float:
        l1, l2, l3, l4 = self.weights
        return l1 * self.s1_mse + l2 * self.s2_mse + l3 * self.ar_ce + l4 * self.aux

    def to_dict(self) -> dict:
        return {"s1_mse": self.s1_mse, "s2_mse": self.s2_mse, "ar_ce": self.ar_ce, "aux": self.aux,
                "total": self.total}


def heatmap_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum over views of the per-view pixel MSE, averaged over the batch. pred (B, V, H, W).

    Both maps are scaled by the pixel count first (a uniform map becomes all
    ones), which keeps the loss scale independent of the view resolution.
    """
    if pred.shape != target.shape:
        raise T.ShapeError(f"heatmap shapes differ: {pred.shape} vs {target.shape}")
    hw = float(pred.shape[-2] * pred.shape[-1])
    return T.mse(pred * hw, np.asarray(target) * hw) * float(pred.shape[1])


def chunk_loss(logits: dict, values: np.ndarray) -> Tensor:
    """Cross-entropy summed over the five discrete tokens, averaged over the batch."""
    values = np.asarray(values)
    b = values.shape[0]
    rot = T.cross_entropy(logits[1], values[:, :4], reduction="sum")
    grip = T.cross_entropy(logits[2], values[:, 4], reduction="sum")
    return (rot + grip) * (1.0 / b)


def routing_loss(records: list[RoutingRecord], tau: float) -> Tensor | None:
    terms = [aux_loss(r, tau) for r in records if r.n > 0]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def compute_losses(hm1: Tensor, gt1, hm2: Tensor, gt2, logits: dict, values, records, cfg: ExperimentConfig):
    t = cfg.train
    weights = (t.lambda_coarse, t.lambda_fine, t.lambda_ar, cfg.moe.lambda_aux)
    l1 = heatmap_loss(hm1, gt1)
    l2 = heatmap_loss(hm2, gt2)
    l3 = chunk_loss(logits, values)
    l4 = routing_loss(records, cfg.moe.threshold)
    total = l1 * weights[0] + l2 * weights[1] + l3 * weights[2]
    if l4 is not None:
        total = total + l4 * weights[3]
    br = LossBreakdown(float(l1.data), float(l2.data), float(l3.data),
                       float(l4.data) if l4 is not None else 0.0, weights)
    return total, br


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class StageOutput:
    point: np.ndarray
    heatmaps: np.ndarray           # (V, H, W)
    degenerate: bool
    box: Box
    views: list[CameraModel]
    records: list[RoutingRecord] = field(default_factory=list)


@dataclass
class FineOutput(StageOutput):
    sequence: ActionTokenSequence | None = None
    chunk_probs: dict = field(default_factory=dict)


class Policy(Module):
    def __init__(self, cfg: ExperimentConfig, seed: int | None = None):
        self.cfg = cfg
        m = cfg.model
        rng = np.random.default_rng(cfg.train.seed if seed is None else seed)
        self.skills = list(cfg.env.skills)
        self.coarse_encoder = FusionEncoder(rng, m, N_VIEWS)
        self.coarse_decoder = CCMT(rng, m, cfg.moe, self.skills)
        self.fine_encoder = FusionEncoder(rng, m, N_VIEWS)
        self.fine_decoder = CCMT(rng, m, cfg.moe, self.skills)
        self.workspace = Box(*cfg.env.workspace)
        self.coarse_views = virtual_views(self.workspace, m.image_size)

    # -- helpers ----------------------------------------------------------
    def _fuse(self, encoder, images: np.ndarray, tokens, proprio) -> Tensor:
        dt = T.get_default_dtype()
        return encoder(Tensor(images, dtype=dt), np.asarray(tokens), Tensor(np.asarray(proprio), dtype=dt))

    def fine_box(self, center) -> Box:
        return Box.cube(center, float(np.max(self.workspace.size)) / self.cfg.model.zoom)

    def fine_crop(self, pc: PointCloud, center) -> tuple[PointCloud, Box]:
        """Training-side crop with the same widening rule as inference, so a
        target in free space is learned at the scale it is later seen at."""
        try:
            return crop_and_zoom(pc, center, self.cfg.model.zoom, self.workspace)
        except GeometryError:
            box = self.fine_box(center)
            return crop_workspace(pc, box), box

    def prompt(self, z: Tensor, points, views_per_item) -> Tensor:
        """Two prompt tokens per item: the fused feature sampled at the point's
        projection (averaged over views) and the spatial mean of the feature map."""
        b, v, d, gh, gw = z.shape
        coords = []
        for p, views in zip(points, views_per_item):
            for cam in views:
                uv, _ = cam.project(np.asarray(p, dtype=np.float64)[None])
                coords.append(feature_coords(uv[0], self.cfg.model.patch))
        sampled = T.grid_sample(z.reshape(b * v, d, gh, gw), np.array(coords))
        local = T.mean(sampled.reshape(b, v, d), axis=1)
        pooled = T.mean(z.reshape(b, v, d, gh * gw), axis=(1, 3))
        return T.stack([local, pooled], axis=1)

    # -- training forward ---------------------------------------------------
    def forward_batch(self, batch: list[Example], rng: np.random.Generator | None = None, augment_data: bool = False):
        """Teacher-forced pass over a batch. Returns (total loss tensor, LossBreakdown, records)."""
        cfg, m = self.cfg, self.cfg.model
        tr = cfg.train
        rng = rng or np.random.default_rng(0)
        coarse_in, fine_in, gt1, gt2, pros, values, points, fviews = [], [], [], [], [], [], [], []
        for ex in batch:
            if augment_data:
                pc, pro, action = augment(ex, rng, self.workspace.center, tr.augment_translate, tr.augment_yaw_deg)
            else:
                pc, pro, action = ex.cloud(), ex.proprio, ex.action
            pc = crop_workspace(pc, self.workspace)
            p = np.clip(action.p, self.workspace.lo, self.workspace.hi)
            coarse_in.append(render_input(pc, self.coarse_views))
            gt1.append(gaussian_heatmaps(p, self.coarse_views, m.sigma))
            center = p + rng.uniform(-tr.crop_jitter, tr.crop_jitter, size=3) if tr.crop_jitter > 0 else p
            crop, box = self.fine_crop(pc, center)
            views = virtual_views(box, m.image_size)
            fine_in.append(render_input(crop, views))
            gt2.append(gaussian_heatmaps(p, views, m.sigma))
            pros.append(pro)
            values.append(discretize_action(action, m.bins).values)
            points.append(p)
            fviews.append(views)
        tokens = np.stack([ex.tokens for ex in batch])
        skills = np.array([ex.skill for ex in batch])
        pros = np.stack(pros)
        values = np.stack(values)

        z1 = self._fuse(self.coarse_encoder, np.stack(coarse_in), tokens, pros)
        q1, rec1 = self.coarse_decoder.query(z1, skills)
        hm1 = self.coarse_decoder.predict_heatmaps(q1, z1)

        z2 = self._fuse(self.fine_encoder, np.stack(fine_in), tokens, pros)
        q2, rec2 = self.fine_decoder.query(z2, skills)
        hm2 = self.fine_decoder.predict_heatmaps(q2, z2)
        prompt = self.prompt(z2, points, fviews)
        logits, rec3 = self.fine_decoder.chunk_logits(prompt, values[:, :4], z2, skills)

        records = rec1 + rec2 + rec3
        total, br = compute_losses(hm1, np.stack(gt1), hm2, np.stack(gt2), logits, values, records, cfg)
        return total, br, records

    def inspect_example(self, ex: Example) -> dict:
        """Predicted and ground-truth heatmaps of both stages for one example,
        with the fine crop centered on the ground truth (no augmentation)."""
        m = self.cfg.model
        pc = crop_workspace(ex.cloud(), self.workspace)
        p = np.clip(ex.action.p, self.workspace.lo, self.workspace.hi)
        tokens = np.asarray(ex.tokens)
        coarse = self.coarse_stage(pc, tokens, ex.proprio, ex.skill)
        crop, box = self.fine_crop(pc, p)
        views = virtual_views(box, m.image_size)
        with T.no_grad():
            z = self._fuse(self.fine_encoder, render_input(crop, views)[None],
                           tokens[None], ex.proprio[None])
            q, rec = self.fine_decoder.query(z, [ex.skill])
            hm2 = self.fine_decoder.predict_heatmaps(q, z).data[0]
        return {"coarse_pred": coarse.heatmaps, "coarse_gt": gaussian_heatmaps(p, self.coarse_views, m.sigma),
                "fine_pred": hm2, "fine_gt": gaussian_heatmaps(p, views, m.sigma),
                "coarse_records": coarse.records, "fine_records": rec}

    # -- inference ---------------------------------------------------------
    def coarse_stage(self, pc: PointCloud, tokens, proprio, skill: str) -> StageOutput:
        with T.no_grad():
            z = self._fuse(self.coarse_encoder, render_input(pc, self.coarse_views)[None], tokens[None], proprio[None])
            q, rec = self.coarse_decoder.query(z, [skill])
            hm = self.coarse_decoder.predict_heatmaps(q, z).data[0]
        tri = triangulate(hm, self.coarse_views, self.workspace)
        return StageOutput(tri.point, hm, tri.degenerate, self.workspace, self.coarse_views, rec)

    def fine_stage(self, pc: PointCloud, p_coarse, tokens, proprio, skill: str,
                   teacher: ActionCommand | None = None) -> FineOutput:
        m = self.cfg.model
        crop, box = crop_and_zoom(pc, p_coarse, m.zoom, self.workspace)
        views = virtual_views(box, m.image_size)
        with T.no_grad():
            z = self._fuse(self.fine_encoder, render_input(crop, views)[None], tokens[None], proprio[None])
            q, rec = self.fine_decoder.query(z, [skill])
            hm = self.fine_decoder.predict_heatmaps(q, z).data[0]
            tri = triangulate(hm, views, box)
            p = tri.point if teacher is None else np.asarray(teacher.p)
            prompt = self.prompt(z, [p], [views])
            if teacher is not None:
                vals = discretize_action(teacher, m.bins).values
                logits, r2 = self.fine_decoder.chunk_logits(prompt, vals[None, :4], z, [skill])
                probs = {k: T.softmax(v, axis=-1).data[0] for k, v in logits.items()}
            else:
                vals, probs, r2 = self.decode_chunks(prompt, z, skill)
        seq = tokens_from_values(vals)
        return FineOutput(p, hm, tri.degenerate, box, views, rec + r2, seq, probs)

    def decode_chunks(self, prompt: Tensor, z: Tensor, skill: str):
        """Greedy chunk-by-chunk decoding; each chunk conditions on all earlier ones."""
        l1, r1 = self.fine_decoder.chunk_logits(prompt, np.zeros((1, 0), dtype=np.int64), z, [skill])
        p1 = T.softmax(l1[1], axis=-1).data[0]
        rot = np.argmax(p1, axis=-1)
        l2, r2 = self.fine_decoder.chunk_logits(prompt, rot[None], z, [skill])
        p2 = T.softmax(l2[2], axis=-1).data[0]
        vals = np.concatenate([rot, [int(np.argmax(p2))]])
        return vals, {1: p1, 2: p2}, r1 + r2

    def act(self, obs: Observation, skill: str) -> ActionCommand:
        pc = observation_cloud(obs, self.workspace)
        tokens = np.asarray(obs.tokens)
        pro = obs.proprio()
        coarse = self.coarse_stage(pc, tokens, pro, skill)
        try:
            fine = self.fine_stage(pc, coarse.point, tokens, pro, skill)
        except GeometryError:
            if len(pc) == 0:
                raise
            near = pc.positions[int(np.argmin(np.linalg.norm(pc.positions - coarse.point, axis=1)))]
            log.warning("empty crop at %s; recentering on the nearest observed point %s",
                        np.round(coarse.point, 3), np.round(near, 3))
            fine = self.fine_stage(pc, near, tokens, pro, skill)
        return dediscretize_action(fine.sequence, fine.point, self.cfg.model.bins)

    # -- persistence ---------------------------------------------------------
    def save(self, path, extra: dict | None = None, arrays: dict | None = None) -> None:
        meta = {"config": self.cfg.to_dict(), "config_hash": config_hash(self.cfg)}
        meta.update(extra or {})
        tensors = dict(self.state_dict())
        for k, v in (arrays or {}).items():
            tensors[f"opt.{k}"] = v
        checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path, cfg: ExperimentConfig | None = None) -> tuple["Policy", dict, dict]:
        meta, tensors = checkpoint.load(path)
        cfg = cfg or from_dict(meta["config"])
        policy = cls(cfg)
        params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
        opt = {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")}
        policy.load_state_dict(params)
        return policy, meta, opt


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    steps: int
    history: list[dict]
    checkpoints: list[Path]
    seconds: float


def _batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, batch, 7]))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def train(policy: Policy, examples: list[Example], out_dir=None, *, epochs: int | None = None,
          max_steps: int | None = None, resume=None, fixed_batch: bool = False,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Shuffled mini-batch training with per-epoch checkpoints and a JSON-lines log.

    ``fixed_batch`` repeats the first batch every step (overfit runs);
    ``max_steps`` stops early. Checkpoints are written only when ``out_dir`` is set.
    """
    cfg = policy.cfg
    tr = cfg.train
    if not examples:
        raise TrainingError("no training examples")
    epochs = tr.epochs if epochs is None else epochs
    bs = tr.batch_size
    per_epoch = math.ceil(len(examples) / bs)
    total_steps = epochs * per_epoch if max_steps is None else min(max_steps, epochs * per_epoch)
    warmup = clamp_warmup(tr.warmup_steps, total_steps)
    state = OptimizerState(lr=tr.lr, warmup_steps=warmup, trust_ratio=tr.trust_ratio,
                           decay_steps=max(total_steps - warmup, 0) if tr.cosine_decay else 0)
    opt = Lamb(dict(policy.named_parameters()), state)
    start_epoch = 0
    if resume is not None:
        meta, tensors = checkpoint.load(resume)
        policy.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("opt.")})
        opt.load_state_arrays({k[4:]: v for k, v in tensors.items() if k.startswith("opt.")}, meta["step"])
        start_epoch = meta["epoch"]
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume is not None else "w")
    history, ckpts = [], []
    t0 = time.time()
    step = opt.state.step
    try:
        for epoch in range(start_epoch, epochs):
            order = epoch_order(len(examples), tr.seed, epoch)
            for b in range(per_epoch):
                if step >= total_steps:
                    break
                idx = np.arange(min(bs, len(examples))) if fixed_batch else order[b * bs:(b + 1) * bs]
                batch = [examples[i] for i in idx]
                opt.zero_grad()
                loss, br, _ = policy.forward_batch(batch, _batch_rng(tr.seed, epoch, b), tr.augment)
                if not np.isfinite(br.total):
                    dump = {"step": step, "epoch": epoch, "batch": b, "examples": [int(i) for i in idx],
                            "losses": br.to_dict()}
                    if out is not None:
                        (out / "nan_batch.json").write_text(json.dumps(dump, indent=1) + "\n")
                    raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}, batch {b}): {dump}")
                loss.backward()
                lr = opt.step()
                step += 1
                rec = {"step": step, "epoch": epoch, "batch": b, "lr": lr, **br.to_dict()}
                history.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    log_fh.flush()
                if callback is not None:
                    callback(rec)
            if out is not None:
                path = out / f"epoch_{epoch + 1:03d}.ckpt"
                policy.save(path, {"epoch": epoch + 1, "step": step}, opt.state_arrays())
                ckpts.append(path)
            if step >= total_steps:
                break
        if out is not None:
            path = out / "final.ckpt"
            policy.save(path, {"epoch": epochs, "step": step})
            ckpts.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(step, history, ckpts, time.time() - t0)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def infer_episode(policy: Policy, scene, cameras, tokens, max_steps: int | None = None):
    from .toyenv.metrics import rollout

    steps = policy.cfg.env.max_steps if max_steps is None else max_steps
    return rollout(policy.act, scene, cameras, tokens, steps)


def run_benchmark(policy: Policy, difficulty: str = "easy", n_cases: int = 32, seed: int = 0,
                  skills: list[str] | None = None, meta: dict | None = None) -> dict:
    from .toyenv.metrics import benchmark

    env = policy.cfg.env
    info = {"config_hash": config_hash(policy.cfg)}
    info.update(meta or {})
    return benchmark(policy.act, skills or policy.skills, difficulty, n_cases, seed,
                     workspace=env.workspace, cameras=env.cameras, camera_size=env.camera_size,
                     instr_len=policy.cfg.model.instr_len, max_steps=env.max_steps, meta=info)
