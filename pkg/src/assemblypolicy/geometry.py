"""Cameras, point clouds, re-rendering to virtual views, heatmaps and triangulation.

Pixel convention: integer image coordinates address pixel centers, so a
W-pixel row spans continuous u in [-0.5, W - 0.5]. Camera frames follow the
usual vision convention (x right, y down, z forward); poses map camera frame
to robot base frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import rotations
from .tensor import bilinear_weights

log = logging.getLogger(__name__)

LOG_FLOOR = np.log(1e-12)
DEFAULT_SIGMA = 1.5


class GeometryError(ValueError):
    pass


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    kind: str = "pinhole"
    scale: float = 1.0  # meters per pixel, orthographic only

    def __post_init__(self):
        self.rotation = rotations.canonical(self.rotation)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.kind not in ("pinhole", "orthographic"):
            raise GeometryError(f"unknown projection kind {self.kind!r}")
        if self.kind == "pinhole" and (self.fx <= 0 or self.fy <= 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.kind == "orthographic" and self.scale <= 0:
            raise GeometryError("orthographic scale must be positive")
        self._R = rotations.to_matrix(self.rotation)

    @property
    def matrix(self) -> np.ndarray:
        return self._R

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self._R

    def to_base(self, points_cam) -> np.ndarray:
        return np.asarray(points_cam, dtype=np.float64) @ self._R.T + self.translation

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Base-frame points (N, 3) -> pixel coords (N, 2) and depth (N,)."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        if self.kind == "pinhole":
            with np.errstate(divide="ignore", invalid="ignore"):
                u = self.fx * pc[..., 0] / z + self.cx
                v = self.fy * pc[..., 1] / z + self.cy
        else:
            u = pc[..., 0] / self.scale + self.cx
            v = pc[..., 1] / self.scale + self.cy
        return np.stack([u, v], axis=-1), z

    def unproject(self, uv, depth) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        if self.kind == "pinhole":
            x = (uv[..., 0] - self.cx) / self.fx * depth
            y = (uv[..., 1] - self.cy) / self.fy * depth
        else:
            x = (uv[..., 0] - self.cx) * self.scale
            y = (uv[..., 1] - self.cy) * self.scale
        return self.to_base(np.stack([x, y, depth], axis=-1))

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.asarray(uv)
        return ((uv[..., 0] >= -0.5) & (uv[..., 0] < self.width - 0.5)
                & (uv[..., 1] >= -0.5) & (uv[..., 1] < self.height - 0.5))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": [float(x) for x in self.rotation],
                "translation": [float(x) for x in self.translation],
                "kind": self.kind, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(**{**d, "rotation": np.array(d["rotation"]), "translation": np.array(d["translation"])})


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Quaternion of a camera at ``eye`` whose optical axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return rotations.from_matrix(np.stack([x, y, z], axis=1))


def pinhole_camera(eye, target, width: int, height: int, fov_deg: float) -> CameraModel:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraModel(f, f, (width - 1) / 2, (height - 1) / 2, width, height,
                       rotation=look_at(eye, target), translation=np.asarray(eye, dtype=np.float64))


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise GeometryError(f"degenerate box lo={self.lo} hi={self.hi}")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def to_list(self) -> list[list[float]]:
        return [self.lo.tolist(), self.hi.tolist()]

    @classmethod
    def cube(cls, center, side: float) -> "Box":
        c = np.asarray(center, dtype=np.float64)
        return cls(c - side / 2, c + side / 2)


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float32).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise GeometryError("positions and colors differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.positions[mask], self.colors[mask])

    @classmethod
    def concat(cls, clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(np.concatenate([c.positions for c in clouds]), np.concatenate([c.colors for c in clouds]))


def backproject(depth, rgb, cam: CameraModel) -> PointCloud:
    """One base-frame colored point per pixel with positive depth."""
    if cam.kind == "pinhole" and (cam.fx == 0 or cam.fy == 0):
        raise GeometryError("camera with zero focal length")
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0):
        raise GeometryError("negative depth")
    vs, us = np.nonzero(depth > 0)
    d = depth[vs, us]
    pts = cam.unproject(np.stack([us, vs], axis=-1).astype(np.float64), d)
    cols = np.asarray(rgb)[vs, us] if len(vs) else np.zeros((0, 3))
    return PointCloud(pts, cols)


def crop_workspace(pc: PointCloud, box: Box) -> PointCloud:
    return pc.subset(box.contains(pc.positions))


# ---------------------------------------------------------------------------
# virtual views and rendering
# ---------------------------------------------------------------------------

_VIEW_AXES = {
    # name: (optical axis, image-right axis) in base frame
    "top": ((0.0, 0.0, -1.0), (1.0, 0.0, 0.0)),
    "front": ((1.0, 0.0, 0.0), (0.0, -1.0, 0.0)),
    "side": ((0.0, -1.0, 0.0), (-1.0, 0.0, 0.0)),
}
VIEW_NAMES = tuple(_VIEW_AXES)


def orthographic_view(box: Box, name: str, size: int) -> CameraModel:
    forward, right = (np.array(a) for a in _VIEW_AXES[name])
    down = np.cross(forward, right)
    rot = rotations.from_matrix(np.stack([right, down, forward], axis=1))
    side = float(np.max(box.size))
    eye = box.center - forward * side
    c = (size - 1) / 2
    return CameraModel(1.0, 1.0, c, c, size, size, rotation=rot, translation=eye,
                       kind="orthographic", scale=side / size)


def virtual_views(box: Box, size: int = 64, names=VIEW_NAMES) -> list[CameraModel]:
    """Axis-aligned orthographic views centered on ``box``, each covering its largest side."""
    return [orthographic_view(box, n, size) for n in names]


def splat(pc: PointCloud, cam: CameraModel, background: float = 0.0):
    """Z-buffered one-pixel splat. Returns (rgb (H, W, 3), mask (H, W), depth (H, W)).

    Nearest depth wins; equal depths go to the lowest point index.
    """
    h, w = cam.height, cam.width
    rgb = np.full((h, w, 3), background, dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    depth = np.zeros((h, w), dtype=np.float64)
    if len(pc) == 0:
        return rgb, mask, depth
    uv, z = cam.project(pc.positions)
    ok = np.isfinite(uv).all(axis=1) & (z > 0) & cam.in_bounds(uv)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return rgb, mask, depth
    px = np.floor(uv[idx] + 0.5).astype(np.int64)
    px[:, 0] = np.clip(px[:, 0], 0, w - 1)
    px[:, 1] = np.clip(px[:, 1], 0, h - 1)
    flat = px[:, 1] * w + px[:, 0]
    order = np.lexsort((idx, z[idx]))
    first_flat, first = np.unique(flat[order], return_index=True)
    win = order[first]
    rgb.reshape(-1, 3)[first_flat] = pc.colors[idx[win]]
    mask.reshape(-1)[first_flat] = True
    depth.reshape(-1)[first_flat] = z[idx[win]]
    return rgb, mask, depth


def render_views(pc: PointCloud, views, background: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Render a cropped cloud into each view: (V, H, W, 3) colors and (V, H, W) validity."""
    imgs, masks = [], []
    for cam in views:
        rgb, mask, _ = splat(pc, cam, background)
        imgs.append(rgb)
        masks.append(mask)
    return np.stack(imgs), np.stack(masks)


# ---------------------------------------------------------------------------
# heatmaps and triangulation
# ---------------------------------------------------------------------------

class Heatmap(NamedTuple):
    values: np.ndarray
    view: int
    onscreen: bool


def gaussian_heatmap(p, view: CameraModel, sigma: float = DEFAULT_SIGMA, index: int = 0) -> Heatmap:
    """Normalized isotropic Gaussian around the projection of ``p``.

    Off-screen projections give a uniform map with ``onscreen=False``.
    """
    uv, _ = view.project(np.asarray(p, dtype=np.float64)[None])
    uv = uv[0]
    h, w = view.height, view.width
    if not (np.all(np.isfinite(uv)) and view.in_bounds(uv)):
        log.warning("ground-truth point projects off-screen in view %d", index)
        return Heatmap(np.full((h, w), 1.0 / (h * w)), index, False)
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    gu = np.exp(-((us - uv[0]) ** 2) / (2 * sigma ** 2))
    gv = np.exp(-((vs - uv[1]) ** 2) / (2 * sigma ** 2))
    vals = gv[:, None] * gu[None, :]
    return Heatmap(vals / vals.sum(), index, True)


def gaussian_heatmaps(p, views, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    return np.stack([gaussian_heatmap(p, v, sigma, i).values for i, v in enumerate(views)])


def bilinear_read(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    h, w = img.shape
    idx, wts = bilinear_weights(h, w, uv)
    out = np.zeros(uv.shape[:-1])
    for (vi, ui), wt in zip(idx, wts):
        out += img[vi, ui] * wt
    return out


def log_likelihood(heatmaps, views, points) -> np.ndarray:
    """Sum over views of floored log heatmap values at each point's projection."""
    total = np.zeros(len(points))
    for hm, cam in zip(heatmaps, views):
        uv, _ = cam.project(points)
        vals = bilinear_read(np.asarray(hm, dtype=np.float64), uv)
        total += np.log(np.maximum(vals, 1e-12))
    return total


def _lattice(box: Box, n: int) -> tuple[np.ndarray, np.ndarray]:
    pitch = box.size / n
    axes = [box.lo[i] + (np.arange(n) + 0.5) * pitch[i] for i in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return g, pitch


class Triangulation(NamedTuple):
    point: np.ndarray
    degenerate: bool
    score: float


def triangulate(heatmaps, views, box: Box, coarse: int = 32, refine: int = 9,
                refine_div: int = 8) -> Triangulation:
    """Maximize the multi-view joint log-likelihood over a two-level lattice.

    Level one is a ``coarse``^3 lattice of cell centers over ``box``; level two
    is a ``refine``^3 lattice of pitch (coarse pitch / ``refine_div``) centered
    on the level-one winner and clipped to the box.
    """
    if len(views) < 2:
        raise GeometryError("triangulation needs at least two views")
    grid, pitch = _lattice(box, coarse)
    scores = log_likelihood(heatmaps, views, grid)
    if np.all(scores <= len(views) * LOG_FLOOR + 1e-9):
        return Triangulation(box.center, True, float(scores.max()))
    best = grid[int(np.argmax(scores))]
    fine_pitch = pitch / refine_div
    offs = (np.arange(refine) - (refine - 1) / 2)
    local = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), axis=-1).reshape(-1, 3) * fine_pitch
    cand = np.clip(best + local, box.lo, box.hi)
    s2 = log_likelihood(heatmaps, views, cand)
    k = int(np.argmax(s2))
    return Triangulation(cand[k], False, float(s2[k]))


def fine_pitch(box: Box, coarse: int = 32, refine_div: int = 8) -> np.ndarray:
    return box.size / coarse / refine_div


def crop_and_zoom(pc: PointCloud, center, alpha: float, workspace: Box) -> tuple[PointCloud, Box]:
    """Cube of side (largest workspace side) / alpha around ``center``.

    An empty crop is retried once at twice the side before failing.
    """
    if alpha <= 1:
        raise GeometryError(f"zoom factor must exceed 1, got {alpha}")
    side = float(np.max(workspace.size)) / alpha
    for attempt in range(2):
        box = Box.cube(center, side)
        crop = crop_workspace(pc, box)
        if len(crop):
            return crop, box
        side *= 2
    raise GeometryError(f"empty crop around {np.round(center, 4).tolist()}")


# ---------------------------------------------------------------------------
# inspection exports
# ---------------------------------------------------------------------------

def _to_u8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    m = arr.max() if arr.size else 0.0
    if m <= 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.clip(np.round(arr / m * 255), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray, normalize: bool = True) -> None:
    """8-bit binary PGM; max-normalized unless ``normalize`` is False (values in [0, 1])."""
    data = _to_u8(img) if normalize else np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm16(path, img_u16: np.ndarray) -> None:
    data = np.asarray(img_u16, dtype=">u2")
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + data.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """8-bit binary PPM from colors in [0, 1]."""
    data = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def _read_netpbm(path):
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    return magic, w, h, maxval, raw[pos:]


def read_pgm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_netpbm(path)
    if magic != b"P5":
        raise GeometryError(f"{path}: not a binary PGM")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    return np.frombuffer(body, dtype=dt, count=w * h).reshape(h, w)


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_netpbm(path)
    if magic != b"P6" or maxval != 255:
        raise GeometryError(f"{path}: not an 8-bit binary PPM")
    return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).astype(np.float32) / 255.0


def write_xyzrgb(path, pc: PointCloud) -> None:
    rows = np.hstack([pc.positions, pc.colors.astype(np.float64)])
    np.savetxt(path, rows, fmt="%.6f")
