"""Simulated RGB-D cameras: dense surface sampling splatted into pinhole views."""
from __future__ import annotations

import numpy as np

from .. import rotations
from ..fusion import CameraFrame, Observation
from ..geometry import CameraModel, PointCloud, pinhole_camera, splat
from .scene import (FIXTURE_CENTER, FIXTURE_COLOR, FIXTURE_SIZE, TABLE_COLOR, TABLE_TOP, TRAY_COLOR,
                    TRAY_SIZE, SceneState)
from .skills import SKILLS

CAMERA_TARGET = (0.48, 0.0, 0.05)
CAMERA_EYES = ((1.25, 0.0, 0.75), (0.55, 0.85, 0.70), (0.55, -0.85, 0.70), (-0.05, 0.0, 0.90))
FOV_DEG = 40.0
TABLE_SPACING = 0.004
PART_SPACING = 0.003
LIGHT = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])
SLOT_SIZE = 0.05
HOLE_COLOR = (0.08, 0.08, 0.08)
PALM_COLOR = (0.20, 0.20, 0.24)
FINGER_COLOR = (0.92, 0.92, 0.96)
FINGER_SIZE = (0.01, 0.02, 0.05)
PALM_SIZE = (0.09, 0.03, 0.015)
OPEN_HALF_WIDTH = 0.035
CLOSED_HALF_WIDTH = 0.018
GRIPPER_ID = 99


def default_cameras(count: int = 3, size: int = 128, fov_deg: float = FOV_DEG) -> list[CameraModel]:
    if count not in (3, 4):
        raise ValueError("camera count must be 3 or 4")
    return [pinhole_camera(eye, CAMERA_TARGET, size, size, fov_deg) for eye in CAMERA_EYES[:count]]


def _grid(a: float, b: float, spacing: float) -> np.ndarray:
    n = max(int(np.ceil((b - a) / spacing)), 1)
    return a + (np.arange(n) + 0.5) * (b - a) / n


def _plane(u_rng, v_rng, spacing, axes, w_value, normal):
    """Samples on an axis-aligned rectangle; ``axes`` names the (u, v, w) coordinate indices."""
    u = _grid(*u_rng, spacing)
    v = _grid(*v_rng, spacing)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.zeros((uu.size, 3))
    pts[:, axes[0]] = uu.ravel()
    pts[:, axes[1]] = vv.ravel()
    pts[:, axes[2]] = w_value
    return pts, np.broadcast_to(np.asarray(normal, dtype=np.float64), pts.shape)


def box_surface(size, spacing: float, top_only: bool = False):
    """Points and outward normals on a box centered at the origin."""
    hx, hy, hz = np.asarray(size) / 2
    faces = [_plane((-hx, hx), (-hy, hy), spacing, (0, 1, 2), hz, (0, 0, 1))]
    if not top_only:
        faces += [
            _plane((-hx, hx), (-hy, hy), spacing, (0, 1, 2), -hz, (0, 0, -1)),
            _plane((-hy, hy), (-hz, hz), spacing, (1, 2, 0), hx, (1, 0, 0)),
            _plane((-hy, hy), (-hz, hz), spacing, (1, 2, 0), -hx, (-1, 0, 0)),
            _plane((-hx, hx), (-hz, hz), spacing, (0, 2, 1), hy, (0, 1, 0)),
            _plane((-hx, hx), (-hz, hz), spacing, (0, 2, 1), -hy, (0, -1, 0)),
        ]
    return np.concatenate([f[0] for f in faces]), np.concatenate([f[1] for f in faces])


def cylinder_surface(radius: float, height: float, spacing: float):
    hz = height / 2
    n_ang = max(int(np.ceil(2 * np.pi * radius / spacing)), 8)
    ang = (np.arange(n_ang) + 0.5) * 2 * np.pi / n_ang
    zs = _grid(-hz, hz, spacing)
    a, z = np.meshgrid(ang, zs, indexing="ij")
    side_n = np.stack([np.cos(a.ravel()), np.sin(a.ravel()), np.zeros(a.size)], axis=1)
    side = side_n * radius + np.stack([np.zeros(a.size), np.zeros(a.size), z.ravel()], axis=1)
    xy = _grid(-radius, radius, spacing)
    gx, gy = np.meshgrid(xy, xy, indexing="ij")
    inside = gx ** 2 + gy ** 2 <= radius ** 2
    disc = np.stack([gx[inside], gy[inside]], axis=1)
    caps, cap_n = [], []
    for sgn in (1.0, -1.0):
        caps.append(np.column_stack([disc, np.full(len(disc), sgn * hz)]))
        cap_n.append(np.tile([0.0, 0.0, sgn], (len(disc), 1)))
    return np.concatenate([side] + caps), np.concatenate([side_n] + cap_n)


def sphere_surface(radius: float, spacing: float):
    n = max(int(4 * np.pi * radius ** 2 / spacing ** 2), 32)
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    nrm = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return nrm * radius, nrm


def shade(color, normals) -> np.ndarray:
    lam = np.clip(normals @ LIGHT, 0.0, 1.0)
    return np.asarray(color, dtype=np.float64)[None, :] * (0.55 + 0.45 * lam)[:, None]


def part_surface(spec, spacing: float = PART_SPACING):
    if spec.shape == "box":
        return box_surface(spec.size, spacing)
    if spec.shape == "cylinder":
        return cylinder_surface(spec.size[0] / 2, spec.size[2], spacing)
    if spec.shape == "sphere":
        return sphere_surface(spec.size[0] / 2, spacing)
    raise ValueError(f"unknown primitive {spec.shape!r}")


def gripper_surface(position, orientation, openness: float):
    """Two fingers and a palm in the tool frame (z along the approach), tips 1 cm past the TCP."""
    half = CLOSED_HALF_WIDTH + openness * (OPEN_HALF_WIDTH - CLOSED_HALF_WIDTH)
    fz = 0.01 - FINGER_SIZE[2] / 2
    pts, nrm, col = [], [], []
    for center, size, color in [((half, 0.0, fz), FINGER_SIZE, FINGER_COLOR),
                                ((-half, 0.0, fz), FINGER_SIZE, FINGER_COLOR),
                                ((0.0, 0.0, fz - FINGER_SIZE[2] / 2 - PALM_SIZE[2] / 2), PALM_SIZE, PALM_COLOR)]:
        p, n = box_surface(size, PART_SPACING)
        pts.append(p + np.array(center))
        nrm.append(n)
        col.append(np.broadcast_to(np.asarray(color), p.shape))
    pts = rotations.rotate(orientation, np.concatenate(pts)) + np.asarray(position)
    nrm = rotations.rotate(orientation, np.concatenate(nrm))
    return pts, nrm, np.concatenate(col)


def scene_surface(scene: SceneState, with_gripper: bool = True) -> tuple[PointCloud, np.ndarray]:
    """Dense colored surface samples of everything in the scene, with per-point object ids.

    Ids: 0 table, 1 tray, 2 fixture (and its slot markers), 3 + i for part i,
    GRIPPER_ID for the gripper.
    """
    clouds, ids = [], []

    def add(pts, nrm, color, oid):
        clouds.append(PointCloud(pts, shade(color, nrm)))
        ids.append(np.full(len(pts), oid))

    lo, hi = scene.workspace.lo, scene.workspace.hi
    pts, nrm = _plane((lo[0], hi[0]), (lo[1], hi[1]), TABLE_SPACING, (0, 1, 2), TABLE_TOP, (0, 0, 1))
    add(pts, nrm, TABLE_COLOR, 0)

    pts, nrm = box_surface(TRAY_SIZE, PART_SPACING)
    center = np.array([*scene.tray_center, TABLE_TOP + TRAY_SIZE[2] / 2])
    add(pts + center, nrm, TRAY_COLOR, 1)

    pts, nrm = box_surface(FIXTURE_SIZE, PART_SPACING)
    fc = np.array([*FIXTURE_CENTER, TABLE_TOP + FIXTURE_SIZE[2] / 2])
    marker_xy = np.array([s.slot for s in SKILLS.values()])
    on_top = nrm[:, 2] > 0.5
    colors = shade(FIXTURE_COLOR, nrm)
    for (sx, sy), skill in zip(marker_xy, SKILLS.values()):
        half = SLOT_SIZE / 2 if skill.category != "insertion" else skill.part.size[0] / 2 + 0.004
        sel = on_top & (np.abs(pts[:, 0] - sx) <= half) & (np.abs(pts[:, 1] - sy) <= half)
        tint = np.asarray(skill.part.color) * 0.5 + 0.5 if skill.category == "placement" else HOLE_COLOR
        colors[sel] = shade(tint, nrm[sel])
    clouds.append(PointCloud(pts + fc, colors))
    ids.append(np.full(len(pts), 2))

    for i, part in enumerate(scene.parts):
        pts, nrm = part_surface(part.spec)
        pts = rotations.rotate(part.orientation, pts) + part.position
        nrm = rotations.rotate(part.orientation, nrm)
        add(pts, nrm, part.spec.color, 3 + i)
    if with_gripper:
        pts, nrm, col = gripper_surface(scene.tcp_position, scene.tcp_orientation, 1.0 - float(scene.gripper))
        clouds.append(PointCloud(pts, col * (0.55 + 0.45 * np.clip(nrm @ LIGHT, 0.0, 1.0))[:, None]))
        ids.append(np.full(len(pts), GRIPPER_ID))
    return PointCloud.concat(clouds), np.concatenate(ids)


def render_camera(pc: PointCloud, cam: CameraModel) -> CameraFrame:
    rgb, _, depth = splat(pc, cam, background=0.0)
    return CameraFrame(rgb, depth, cam)


def observe(scene: SceneState, cameras: list[CameraModel], tokens) -> Observation:
    pc, _ = scene_surface(scene)
    frames = [render_camera(pc, cam) for cam in cameras]
    return Observation(frames, np.asarray(tokens), scene.tcp_position.copy(),
                       rotations.canonical(scene.tcp_orientation), 1.0 - float(scene.gripper))
