"""Scripted five-keyframe demonstrations and the on-disk demo dataset.

Layout::

    dataset.json
    <skill>/demo_0000/manifest.json
    <skill>/demo_0000/keyframes.json
    <skill>/demo_0000/kf0_cam0.ppm          color, 8-bit
    <skill>/demo_0000/kf0_cam0_depth.pgm    depth, 16-bit, 0.1 mm units
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..actions import CLOSE, OPEN, ActionCommand
from ..fusion import CameraFrame, Observation
from ..geometry import CameraModel, read_pgm, read_ppm, write_pgm16, write_ppm
from .scene import TOP_DOWN, SceneError, SceneState, generate_scene, scene_rng, step
from .sensing import default_cameras, observe
from .skills import SKILLS, VOCAB, tokenize

log = logging.getLogger(__name__)

KEYFRAMES = ("pre-grasp", "grasp", "lift", "pre-place", "place")
PRE_GRASP_HEIGHT = 0.05
LIFT_Z = 0.18
PRE_PLACE_HEIGHT = 0.06
DEPTH_UNIT = 1e-4          # meters per 16-bit depth count
DATASET_VERSION = 1
TRAIN_SPLIT, EVAL_SPLIT = 0, 1


@dataclass
class Keyframe:
    observation: Observation
    action: ActionCommand      # the next keyframe's command


@dataclass
class DemoSample:
    skill: str
    instruction: str
    tokens: np.ndarray
    keyframes: list[Keyframe]
    seed: int = 0
    difficulty: str = "easy"

    def __post_init__(self):
        if len(self.keyframes) != len(KEYFRAMES):
            raise ValueError(f"a demonstration has exactly {len(KEYFRAMES)} keyframes, got {len(self.keyframes)}")


def script_keyframes(scene: SceneState) -> list[ActionCommand]:
    grasp = scene.target.grasp_point
    goal = scene.goal_position
    up = np.array([0.0, 0.0, 1.0])
    plan = [
        ActionCommand(grasp + PRE_GRASP_HEIGHT * up, TOP_DOWN, OPEN),
        ActionCommand(grasp, TOP_DOWN, CLOSE),
        ActionCommand([grasp[0], grasp[1], LIFT_Z], TOP_DOWN, CLOSE),
        ActionCommand(goal + PRE_PLACE_HEIGHT * up, TOP_DOWN, CLOSE),
        ActionCommand(goal, TOP_DOWN, OPEN),
    ]
    for a in plan:
        if not scene.workspace.contains(a.p):
            raise SceneError(f"scripted keyframe {np.round(a.p, 3).tolist()} is outside the workspace")
    return plan


def pick_instruction(skill: str, rng: np.random.Generator) -> str:
    phrases = SKILLS[skill].phrases
    return phrases[int(rng.integers(len(phrases)))]


def script_demonstration(scene: SceneState, cameras: list[CameraModel], instruction: str,
                         instr_len: int = 8) -> DemoSample:
    """Run the scripted plan, pairing each pre-action observation with its action."""
    tokens = tokenize(instruction, instr_len)
    frames = []
    state = scene
    for action in script_keyframes(scene):
        frames.append(Keyframe(observe(state, cameras, tokens), action))
        state, ev = step(state, action)
        if ev.rejected or ev.collision:
            raise SceneError(f"scripted plan failed at {len(frames)}: {ev.to_dict()}")
    if not ev.success:
        raise SceneError("scripted plan does not reach the goal")
    return DemoSample(scene.skill, instruction, tokens, frames, scene.seed, scene.difficulty)


def demo_scene(skill: str, index: int, seed: int, workspace, difficulty: str = "easy",
               split: int = TRAIN_SPLIT) -> tuple[SceneState, str]:
    scene_seed = int(np.random.SeedSequence([seed, split, index]).generate_state(1)[0])
    scene = generate_scene(skill, difficulty, scene_seed, workspace)
    return scene, pick_instruction(skill, scene_rng(scene_seed, skill, 99))


# ---------------------------------------------------------------------------
# dataset io
# ---------------------------------------------------------------------------

def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_demo(demo: DemoSample, path: Path, scene: SceneState | None = None) -> None:
    path.mkdir(parents=True, exist_ok=True)
    kfs = []
    for k, kf in enumerate(demo.keyframes):
        obs = kf.observation
        for c, fr in enumerate(obs.frames):
            write_ppm(path / f"kf{k}_cam{c}.ppm", fr.rgb)
            write_pgm16(path / f"kf{k}_cam{c}_depth.pgm",
                        np.clip(np.round(fr.depth / DEPTH_UNIT), 0, 65535).astype(np.uint16))
        kfs.append({
            "keyframe": KEYFRAMES[k],
            "tcp_position": obs.tcp_position.tolist(),
            "tcp_orientation": obs.tcp_orientation.tolist(),
            "gripper_openness": obs.gripper_openness,
            "action": kf.action.to_dict(),
        })
    _dump(path / "keyframes.json", kfs)
    manifest = {"skill": demo.skill, "instruction": demo.instruction, "tokens": demo.tokens.tolist(),
                "seed": demo.seed, "difficulty": demo.difficulty,
                "cameras": [fr.camera.to_dict() for fr in demo.keyframes[0].observation.frames]}
    if scene is not None:
        manifest["scene"] = scene.summary()
    _dump(path / "manifest.json", manifest)


def read_demo(path: Path) -> DemoSample:
    manifest = json.loads((path / "manifest.json").read_text())
    kfs = json.loads((path / "keyframes.json").read_text())
    cams = [CameraModel.from_dict(c) for c in manifest["cameras"]]
    tokens = np.array(manifest["tokens"], dtype=np.int64)
    frames = []
    for k, rec in enumerate(kfs):
        views = []
        for c, cam in enumerate(cams):
            rgb = read_ppm(path / f"kf{k}_cam{c}.ppm")
            depth = read_pgm(path / f"kf{k}_cam{c}_depth.pgm").astype(np.float64) * DEPTH_UNIT
            views.append(CameraFrame(rgb, depth, cam))
        obs = Observation(views, tokens, np.array(rec["tcp_position"]), np.array(rec["tcp_orientation"]),
                          float(rec["gripper_openness"]))
        frames.append(Keyframe(obs, ActionCommand.from_dict(rec["action"])))
    return DemoSample(manifest["skill"], manifest["instruction"], tokens, frames,
                      manifest["seed"], manifest["difficulty"])


def generate_dataset(out: Path, skills: list[str], count: int, seed: int, *, workspace, cameras: int = 3,
                     camera_size: int = 128, instr_len: int = 8, meta: dict | None = None) -> dict:
    out = Path(out)
    cams = default_cameras(cameras, camera_size)
    manifest = {"version": DATASET_VERSION, "seed": seed, "skills": list(skills), "count": count,
                "workspace": [list(map(float, c)) for c in workspace], "vocab": VOCAB,
                "keyframes": list(KEYFRAMES), "demos": {}}
    manifest.update(meta or {})
    for skill in skills:
        names = []
        for i in range(count):
            scene, text = demo_scene(skill, i, seed, workspace)
            demo = script_demonstration(scene, cams, text, instr_len)
            name = f"demo_{i:04d}"
            write_demo(demo, out / skill / name, scene)
            names.append(name)
        manifest["demos"][skill] = names
        log.info("wrote %d demos for %s", count, skill)
    _dump(out / "dataset.json", manifest)
    return manifest


def load_manifest(root: Path) -> dict:
    path = Path(root) / "dataset.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_dataset(root: Path, skills: list[str] | None = None) -> tuple[dict, list[DemoSample]]:
    root = Path(root)
    manifest = load_manifest(root)
    demos = []
    for skill in skills or manifest["skills"]:
        if skill not in manifest["demos"]:
            raise KeyError(f"dataset has no demos for skill {skill!r}")
        demos += [read_demo(root / skill / name) for name in manifest["demos"][skill]]
    return manifest, demos


def replay(scene: SceneState, actions) -> list[tuple[SceneState, object]]:
    out = []
    for a in actions:
        scene, ev = step(scene, a)
        out.append((scene, ev))
    return out

