"""Tabletop scene state, seeded scene generation and kinematic action execution.

The robot is a free-floating tool center point (TCP) that teleports along
straight segments. Closing the gripper near a part's grasp point attaches the
part, which then follows the TCP rigidly until the gripper opens.
"""
from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field

import numpy as np

from .. import rotations
from ..actions import CLOSE, OPEN, ActionCommand
from ..geometry import Box
from .skills import SKILLS, PartSpec, Skill

DEFAULT_WORKSPACE = ((0.16, -0.32, -0.02), (0.80, 0.32, 0.62))
TABLE_TOP = 0.0
TRAY_SIZE = (0.22, 0.18, 0.02)
TRAY_HOME = (0.40, -0.14)
TRAY_HARD = ((0.34, 0.08), (0.52, -0.20), (0.28, -0.20), (0.60, -0.06))
FIXTURE_CENTER = (0.62, 0.16)
FIXTURE_SIZE = (0.20, 0.20, 0.03)
TRAY_COLOR = (0.55, 0.40, 0.25)
FIXTURE_COLOR = (0.35, 0.35, 0.38)
TABLE_COLOR = (0.72, 0.72, 0.70)

HOME_POSITION = (0.48, 0.0, 0.30)
TOP_DOWN = np.array([0.0, 1.0, 0.0, 0.0])   # tool z axis pointing down

ATTACH_RADIUS = 0.01
INFLATE = 0.005
GOAL_EXEMPT_RADIUS = 0.03
APPROACH_EXEMPT_RADIUS = 0.02
ORIENTATION_TOL_DEG = 10.0
MAX_SPAWN_TRIES = 1000
SPAWN_GAP = 0.01

DIFFICULTIES = ("easy", "hard")


class SceneError(RuntimeError):
    pass


@dataclass
class Part:
    name: str               # owning skill of this part
    spec: PartSpec
    position: np.ndarray    # center, meters
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    @property
    def grasp_point(self) -> np.ndarray:
        return self.position

    def corners(self) -> np.ndarray:
        half = np.array(self.spec.size) / 2
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return rotations.rotate(self.orientation, signs * half) + self.position

    def aabb(self) -> Box:
        c = self.corners()
        return Box(c.min(axis=0), c.max(axis=0))


@dataclass
class SceneState:
    skill: str
    difficulty: str
    seed: int
    workspace: Box
    tray_center: np.ndarray
    parts: list[Part]                 # parts[0] is the target
    goal_position: np.ndarray         # target part center when assembled
    goal_orientation: np.ndarray
    tcp_position: np.ndarray = field(default_factory=lambda: np.array(HOME_POSITION))
    tcp_orientation: np.ndarray = field(default_factory=lambda: TOP_DOWN.copy())
    gripper: int = OPEN
    held: int | None = None
    held_offset: np.ndarray | None = None     # part center in the TCP frame
    held_rotation: np.ndarray | None = None   # part orientation relative to the TCP

    @property
    def target(self) -> Part:
        return self.parts[0]

    @property
    def skill_spec(self) -> Skill:
        return SKILLS[self.skill]

    def copy(self) -> "SceneState":
        return copy.deepcopy(self)

    def static_boxes(self) -> dict[str, Box]:
        lo, hi = self.workspace.lo, self.workspace.hi
        tx, ty = self.tray_center
        fx, fy = FIXTURE_CENTER
        return {
            "table": Box([lo[0], lo[1], TABLE_TOP - 0.05], [hi[0], hi[1], TABLE_TOP]),
            "tray": Box([tx - TRAY_SIZE[0] / 2, ty - TRAY_SIZE[1] / 2, TABLE_TOP],
                        [tx + TRAY_SIZE[0] / 2, ty + TRAY_SIZE[1] / 2, TABLE_TOP + TRAY_SIZE[2]]),
            "fixture": Box([fx - FIXTURE_SIZE[0] / 2, fy - FIXTURE_SIZE[1] / 2, TABLE_TOP],
                           [fx + FIXTURE_SIZE[0] / 2, fy + FIXTURE_SIZE[1] / 2, TABLE_TOP + FIXTURE_SIZE[2]]),
        }

    def summary(self) -> dict:
        return {
            "skill": self.skill, "difficulty": self.difficulty, "seed": self.seed,
            "tray_center": self.tray_center.tolist(),
            "parts": [{"name": p.name, "position": p.position.tolist()} for p in self.parts],
            "goal_position": self.goal_position.tolist(),
        }


def goal_pose(skill: Skill) -> tuple[np.ndarray, np.ndarray]:
    fx, fy = FIXTURE_CENTER
    z = TABLE_TOP + FIXTURE_SIZE[2] - skill.depth + skill.part.height / 2
    return np.array([fx + skill.slot[0], fy + skill.slot[1], z]), np.array([1.0, 0.0, 0.0, 0.0])


def scene_rng(seed: int, skill: str, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(skill.encode()), *tags]))


def _spawn(rng, specs: list[PartSpec], tray_center) -> list[np.ndarray]:
    tx, ty = tray_center
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    for spec in specs:
        half = np.array(spec.size[:2]) / 2
        lo = np.array([tx, ty]) - np.array(TRAY_SIZE[:2]) / 2 + half + SPAWN_GAP
        hi = np.array([tx, ty]) + np.array(TRAY_SIZE[:2]) / 2 - half - SPAWN_GAP
        for _ in range(MAX_SPAWN_TRIES):
            xy = rng.uniform(lo, hi)
            if all(np.any(np.abs(xy - c) >= half + h + SPAWN_GAP) for c, h in placed):
                placed.append((xy, half))
                break
        else:
            raise SceneError(f"could not place {len(specs)} parts without overlap after {MAX_SPAWN_TRIES} tries")
    z0 = TABLE_TOP + TRAY_SIZE[2]
    return [np.array([xy[0], xy[1], z0 + s.height / 2]) for (xy, _), s in zip(placed, specs)]


def generate_scene(skill: str, difficulty: str = "easy", seed: int = 0, workspace=DEFAULT_WORKSPACE,
                   tag: int = 0) -> SceneState:
    """Seeded scene: canonical tray (easy) or one of four held-out tray poses (hard)."""
    if skill not in SKILLS:
        raise KeyError(f"unknown skill {skill!r}")
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    rng = scene_rng(seed, skill, tag, DIFFICULTIES.index(difficulty))
    if difficulty == "easy":
        tray = np.array(TRAY_HOME)
    else:
        tray = np.array(TRAY_HARD[int(rng.integers(len(TRAY_HARD)))])
    others = [s for s in SKILLS if s != skill]
    distractor = others[int(rng.integers(len(others)))]
    names = [skill, distractor]
    specs = [SKILLS[n].part for n in names]
    positions = _spawn(rng, specs, tray)
    goal_p, goal_r = goal_pose(SKILLS[skill])
    ws = workspace if isinstance(workspace, Box) else Box(*workspace)
    scene = SceneState(skill, difficulty, int(seed), ws, tray,
                       [Part(n, s, p) for n, s, p in zip(names, specs, positions)], goal_p, goal_r)
    if not ws.contains(np.array([p.position for p in scene.parts] + [goal_p])).all():
        raise SceneError("scene poses fall outside the workspace")
    return scene


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

@dataclass
class StepEvents:
    rejected: bool = False
    collision: bool = False
    collided_with: list[str] = field(default_factory=list)
    attached: str | None = None
    released: str | None = None
    noop: bool = False        # open command with nothing held
    success: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def segment_hits_box(a, b, box: Box) -> bool:
    """Slab test for the closed segment a-b against an axis-aligned box."""
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(b, dtype=np.float64) - a
    t0, t1 = 0.0, 1.0
    for i in range(3):
        if abs(d[i]) < 1e-12:
            if a[i] < box.lo[i] or a[i] > box.hi[i]:
                return False
            continue
        ta = (box.lo[i] - a[i]) / d[i]
        tb = (box.hi[i] - a[i]) / d[i]
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 > t1:
            return False
    return True


def _inflate(box: Box, r: float) -> Box:
    return Box(box.lo - r, box.hi + r)


def obstacles(scene: SceneState, start, end) -> dict[str, Box]:
    """Inflated boxes that the TCP segment start -> end must not cross.

    Exempt: the held part, the part being approached for a grasp, the fixture
    when the segment ends near the goal, and any box the segment starts in.
    """
    out = {}
    near_goal = np.linalg.norm(np.asarray(end) - scene.goal_position) <= GOAL_EXEMPT_RADIUS
    for name, box in scene.static_boxes().items():
        if name == "fixture" and near_goal:
            continue
        out[name] = _inflate(box, INFLATE)
    for i, part in enumerate(scene.parts):
        if i == scene.held:
            continue
        if np.linalg.norm(part.grasp_point - end) <= APPROACH_EXEMPT_RADIUS:
            continue
        out[f"part:{part.name}"] = _inflate(part.aabb(), INFLATE)
    return {k: b for k, b in out.items() if not b.contains(np.asarray(start))}


def _move_held(scene: SceneState) -> None:
    if scene.held is None:
        return
    part = scene.parts[scene.held]
    part.position = scene.tcp_position + rotations.rotate(scene.tcp_orientation, scene.held_offset)
    part.orientation = rotations.canonical(rotations.multiply(scene.tcp_orientation, scene.held_rotation))


def step(scene: SceneState, action: ActionCommand) -> tuple[SceneState, StepEvents]:
    """Execute one keyframe action on a copy of ``scene``."""
    ev = StepEvents()
    if not scene.workspace.contains(action.p):
        ev.rejected = True
        return scene.copy(), ev
    new = scene.copy()
    start = new.tcp_position.copy()
    for name, box in obstacles(new, start, action.p).items():
        if segment_hits_box(start, action.p, box):
            ev.collision = True
            ev.collided_with.append(name)
    new.tcp_position = action.p.copy()
    new.tcp_orientation = rotations.canonical(action.r)
    _move_held(new)
    if action.g == CLOSE and new.gripper == OPEN:
        dists = [np.linalg.norm(p.grasp_point - new.tcp_position) for p in new.parts]
        k = int(np.argmin(dists))
        if dists[k] <= ATTACH_RADIUS:
            part = new.parts[k]
            inv = rotations.conjugate(new.tcp_orientation)
            new.held = k
            new.held_offset = rotations.rotate(inv, part.position - new.tcp_position)
            new.held_rotation = rotations.multiply(inv, part.orientation)
            ev.attached = part.name
    elif action.g == OPEN:
        if new.held is not None:
            ev.released = new.parts[new.held].name
            new.held = new.held_offset = new.held_rotation = None
        else:
            ev.noop = True
    new.gripper = action.g
    ev.success = is_success(new)
    return new, ev


def is_success(scene: SceneState, tolerance: float | None = None) -> bool:
    """Target released within the skill's position tolerance and 10 degrees of the goal orientation."""
    tol = scene.skill_spec.tolerance if tolerance is None else tolerance
    part = scene.target
    if scene.held == 0:
        return False
    if np.linalg.norm(part.position - scene.goal_position) > tol:
        return False
    angle = np.degrees(rotations.rotation_angle(part.orientation, scene.goal_orientation))
    return bool(angle <= ORIENTATION_TOL_DEG)
