"""Deterministic synthetic scenes: boxes, a camera ring, rendered feature maps, LiDAR.

Rendering casts one ray per feature pixel and writes the attributes of the
first box it hits. The channel layout is fixed (see ``CH_*``): objectness is
a Gaussian centered on the box's projected center, every other channel is
flat over the box's silhouette so that a clean sample reproduces the box's
attributes exactly. The one exception is the range channel, which stores the
horizontal distance of the visible surface point, a stand-in for the depth
cues that real image features carry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from shapely.geometry import Polygon

from .bevgrid import Box3D, GridSpec, LidarCloud
from .errors import DataError, PlacementFailure
from .geometry import CameraModel, project_points, rotation_about_y
from .sampling import FeatureMap

__all__ = [
    "Scene",
    "RenderedViews",
    "ring_rig",
    "generate",
    "generate_dataset",
    "render",
    "lidar_like",
    "ray_box_hits",
    "encode_box",
    "save_scene",
    "load_scene",
    "load_dataset",
    "CLASS_SIZES",
    "N_CHANNELS",
]

N_CLASSES = 3
N_CHANNELS = 32
CH_OBJ = 0
CH_COVER = 1
CH_CLASS = slice(2, 2 + N_CLASSES)
CH_SIZE = slice(5, 8)
CH_YAW = slice(8, 10)
CH_VEL = slice(10, 12)
CH_Y = 12
CH_H = 13
CH_ID = slice(14, N_CHANNELS - 1)
N_ID = N_CHANNELS - 15
CH_RANGE = N_CHANNELS - 1
ATTR_CHANNELS = np.arange(CH_SIZE.start, CH_VEL.stop)
RANGE_SCALE = 60.0

SIZE_SCALE = np.array([4.0, 4.0, 10.0])
VEL_SCALE = 10.0
ATTR_HEIGHT_RANGE = (-5.0, 3.0)

# (w, h, l) ranges per class: small two-wheeler, car, truck
CLASS_SIZES = {
    0: ((0.8, 1.0), (1.1, 1.6), (1.6, 2.0)),
    1: ((1.7, 2.1), (1.4, 1.9), (4.0, 5.0)),
    2: ((2.3, 2.8), (2.4, 3.0), (6.0, 9.0)),
}

GROUND_Y = -1.8


@dataclass
class Scene:
    seed: int
    boxes: list[Box3D]
    cameras: list[CameraModel]
    grid: GridSpec = field(default_factory=GridSpec)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "grid": self.grid.to_dict(),
            "boxes": [b.to_dict() for b in self.boxes],
            "cameras": [c.to_dict() for c in self.cameras],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            seed=int(d.get("seed", 0)),
            boxes=[Box3D.from_dict(b) for b in d["boxes"]],
            cameras=[CameraModel.from_dict(c) for c in d["cameras"]],
            grid=GridSpec.from_dict(d["grid"]) if "grid" in d else GridSpec(),
        )


@dataclass
class RenderedViews:
    maps: list[FeatureMap]


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=1))


def load_scene(path) -> Scene:
    try:
        return Scene.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad scene file {path}: {exc}") from exc


def load_dataset(directory) -> list[Scene]:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise DataError(f"no scene JSON files in {directory}")
    return [load_scene(p) for p in paths]


def ring_rig(
    n: int = 6,
    fx: float = 560.0,
    back_fx: float = 380.0,
    width: int = 800,
    height: int = 448,
) -> list[CameraModel]:
    """Cameras at the ego origin, evenly spaced in yaw; camera ``n // 2`` faces
    backward and gets its own focal length."""
    cams = []
    for k in range(n):
        yaw = 2 * math.pi * k / n
        forward = rotation_about_y(yaw) @ np.array([0.0, 0.0, 1.0])
        down = np.array([0.0, -1.0, 0.0])
        right = np.cross(down, forward)
        rot = np.vstack([right, down, forward])
        f = back_fx if (n > 1 and k == n // 2) else fx
        cams.append(
            CameraModel(fx=f, fy=f, u0=width / 2, v0=height / 2, width=width, height=height, rotation=rot, translation=np.zeros(3))
        )
    return cams


def _azimuth_span(poly: np.ndarray) -> tuple[float, float]:
    """(center azimuth, half width) of a footprint seen from the origin."""
    az = np.arctan2(poly[:, 0], poly[:, 1])
    mid = math.atan2(poly[:, 0].mean(), poly[:, 1].mean())
    rel = (az - mid + np.pi) % (2 * np.pi) - np.pi
    return mid, float(np.max(np.abs(rel)))


def generate(
    seed: int,
    n_boxes: int,
    g: Optional[GridSpec] = None,
    cameras: Optional[list[CameraModel]] = None,
    min_range: float = 5.0,
    max_range: float = 40.0,
    gap: float = 0.5,
    occlusion_free: bool = True,
    max_tries: int = 2000,
) -> Scene:
    """Random non-overlapping boxes around the ego vehicle.

    With ``occlusion_free`` the boxes also occupy disjoint azimuth sectors as
    seen from the camera ring, so no box hides another.
    """
    if n_boxes < 0:
        raise ValueError("n_boxes must be non-negative")
    g = g or GridSpec()
    rng = np.random.default_rng(seed)
    x_lo, z_lo = g.origin
    x_hi = x_lo + g.cells_x * g.cell_size
    z_hi = z_lo + g.cells_z * g.cell_size
    boxes: list[Box3D] = []
    polys: list[Polygon] = []
    sectors: list[tuple[float, float]] = []
    sector_margin = math.radians(2.0)
    for _ in range(n_boxes):
        for _attempt in range(max_tries):
            cls = int(rng.integers(0, N_CLASSES))
            (w0, w1), (h0, h1), (l0, l1) = CLASS_SIZES[cls]
            size = (rng.uniform(w0, w1), rng.uniform(h0, h1), rng.uniform(l0, l1))
            r = rng.uniform(min_range, max_range)
            az = rng.uniform(-math.pi, math.pi)
            box = Box3D(
                center=(r * math.sin(az), rng.uniform(-2.0, 1.0), r * math.cos(az)),
                size=size,
                yaw=rng.uniform(-math.pi, math.pi),
                class_id=cls,
                velocity=(rng.uniform(-8, 8), rng.uniform(-8, 8)),
            )
            fp = box.footprint()
            if fp[:, 0].min() < x_lo or fp[:, 0].max() > x_hi or fp[:, 1].min() < z_lo or fp[:, 1].max() > z_hi:
                continue
            if np.hypot(fp[:, 0], fp[:, 1]).min() < min_range - 1.0:
                continue
            poly = Polygon(fp)
            if any(poly.distance(p) < gap for p in polys):
                continue
            if occlusion_free:
                mid, half = _azimuth_span(fp)
                if any(abs((mid - m + math.pi) % (2 * math.pi) - math.pi) < half + hw + sector_margin for m, hw in sectors):
                    continue
                sectors.append((mid, half))
            boxes.append(box)
            polys.append(poly)
            break
        else:
            raise PlacementFailure(f"could not place box {len(boxes)} after {max_tries} tries (seed {seed})")
    return Scene(seed=seed, boxes=boxes, cameras=cameras if cameras is not None else ring_rig(), grid=g)


def generate_dataset(n_scenes: int, seed: int = 0, boxes: tuple[int, int] = (6, 12), g: Optional[GridSpec] = None) -> list[Scene]:
    """``n_scenes`` scenes with a box count drawn uniformly from ``boxes`` (inclusive).

    Scene ``k`` uses seed ``seed * 1000 + k`` so single scenes can be regenerated.
    """
    rng = np.random.default_rng(seed)
    counts = rng.integers(boxes[0], boxes[1] + 1, size=n_scenes)
    return [generate(seed * 1000 + k, int(n), g) for k, n in enumerate(counts)]


# --- ray casting ---------------------------------------------------------------


def ray_box_hits(origins: np.ndarray, dirs: np.ndarray, boxes: Sequence[Box3D]) -> np.ndarray:
    """Entry distance of every ray into every box, ``inf`` on a miss.

    ``origins``/``dirs`` are ``(R, 3)``; the result is ``(R, B)`` in units of
    the direction vectors' length. Slab test in each box's local frame.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    out = np.full((origins.shape[0], len(boxes)), np.inf)
    for k, box in enumerate(boxes):
        rot = rotation_about_y(box.yaw)  # local -> world
        o = (origins - np.asarray(box.center)) @ rot
        d = dirs @ rot
        half = np.asarray(box.size) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        # a ray parallel to a slab is inside it for all t or for none
        parallel = d == 0
        inside = np.abs(o) <= half
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = lo.max(axis=1)
        t_far = hi.min(axis=1)
        hit = (t_far >= t_near) & (t_far > 0)
        out[hit, k] = np.maximum(t_near[hit], 0.0)
    return out


def encode_box(box: Box3D, index: int) -> np.ndarray:
    """Flat attribute signature of a box (objectness channel left at 1)."""
    sig = np.zeros(N_CHANNELS)
    sig[CH_OBJ] = 1.0
    sig[CH_COVER] = 1.0
    sig[CH_CLASS][box.class_id] = 1.0
    sig[CH_SIZE] = np.clip(np.asarray(box.size) / SIZE_SCALE, 0.0, 1.0)
    sig[CH_YAW] = (np.sin(box.yaw) + 1) / 2, (np.cos(box.yaw) + 1) / 2
    sig[CH_VEL] = np.clip(np.asarray(box.velocity) / (2 * VEL_SCALE) + 0.5, 0.0, 1.0)
    lo, hi = ATTR_HEIGHT_RANGE
    sig[CH_Y] = np.clip((box.center[1] - lo) / (hi - lo), 0.0, 1.0)
    sig[CH_H] = np.clip(box.size[1] / (hi - lo), 0.0, 1.0)
    sig[CH_ID][index % N_ID] = 1.0
    return sig


def decode_attributes(features: np.ndarray) -> dict:
    """Invert :func:`encode_box` on (possibly mixed) features ``(..., C)``.

    Attribute channels are divided by the coverage channel first, which
    undoes dilution by background samples.
    """
    cov = features[..., CH_COVER]
    safe = np.where(cov > 0, cov, 1.0)[..., None]
    f = features / safe
    lo, hi = ATTR_HEIGHT_RANGE
    sin = f[..., CH_YAW][..., 0] * 2 - 1
    cos = f[..., CH_YAW][..., 1] * 2 - 1
    return {
        "class_scores": f[..., CH_CLASS],
        "size": f[..., CH_SIZE] * SIZE_SCALE,
        "yaw": np.arctan2(sin, cos),
        "velocity": (f[..., CH_VEL] - 0.5) * 2 * VEL_SCALE,
        "y": lo + f[..., CH_Y] * (hi - lo),
        "h": f[..., CH_H] * (hi - lo),
        "range": f[..., CH_RANGE] * RANGE_SCALE,
    }


def _pixel_grid(cam: CameraModel, stride: int):
    cols = np.arange(0, cam.width, stride, dtype=float)
    rows = np.arange(0, cam.height, stride, dtype=float)
    uu, vv = np.meshgrid(cols, rows)
    return uu, vv


def render(
    scene: Scene,
    stride: int = 4,
    noise: float = 0.0,
    noise_seed: int = 0,
    dtype=np.float32,
    attr_noise: float = 0.0,
    row_sigma_px: float = 0.0,
) -> RenderedViews:
    """Feature maps for every camera of the scene.

    ``noise`` adds uniform ``[0, noise)`` clutter to every channel of
    background pixels. ``attr_noise`` is the standard deviation of
    independent per-pixel Gaussian noise on the size, yaw and velocity
    channels of object pixels. ``row_sigma_px`` models imprecise vertical
    localization: each box gets, per camera, a Gaussian row offset ``dv``
    (in pixels) that shifts its y and h channels by ``dv * z / fy`` meters,
    so height evidence degrades linearly with depth ``z``.
    """
    maps = []
    sigs = [encode_box(b, k) for k, b in enumerate(scene.boxes)]
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, noise_seed, 7]))
    for ci, cam in enumerate(scene.cameras):
        uu, vv = _pixel_grid(cam, stride)
        rows, cols = uu.shape
        vals = np.zeros((rows, cols, N_CHANNELS))
        d_cam = np.stack([(uu - cam.u0) / cam.fx, (vv - cam.v0) / cam.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        d_world = d_cam @ cam.rotation  # R^T d
        origin = np.broadcast_to(cam.center, d_world.shape)
        background = np.ones(rows * cols, dtype=bool)
        if scene.boxes:
            t = ray_box_hits(origin, d_world, scene.boxes)
            nearest = np.argmin(t, axis=1)
            t_hit = t[np.arange(t.shape[0]), nearest]
            hit = np.isfinite(t_hit)
            surface = origin + d_world * np.where(hit, t_hit, 0.0)[:, None]
            surface_range = np.clip(np.hypot(surface[:, 0], surface[:, 2]) / RANGE_SCALE, 0.0, 1.0)
            background = ~hit
            flat = vals.reshape(-1, N_CHANNELS)
            for k, box in enumerate(scene.boxes):
                sel = hit & (nearest == k)
                if not sel.any():
                    continue
                flat[sel] = sigs[k]
                flat[sel, CH_RANGE] = surface_range[sel]
                if attr_noise > 0:
                    flat[np.ix_(sel, ATTR_CHANNELS)] += rng.normal(0.0, attr_noise, size=(int(sel.sum()), ATTR_CHANNELS.size))
                if row_sigma_px > 0:
                    dv = rng.normal(0.0, row_sigma_px, size=2)
                    meters = t_hit[sel] / cam.fy / (ATTR_HEIGHT_RANGE[1] - ATTR_HEIGHT_RANGE[0])
                    flat[sel, CH_Y] += dv[0] * meters
                    flat[sel, CH_H] += dv[1] * meters
                flat[sel, CH_OBJ] = 0.5 + 0.5 * _blob(cam, box, uu.ravel()[sel], vv.ravel()[sel])
        if noise > 0:
            flat = vals.reshape(-1, N_CHANNELS)
            flat[background] = rng.uniform(0.0, noise, size=(int(background.sum()), N_CHANNELS))
        maps.append(FeatureMap(camera_index=ci, values=vals.astype(dtype), stride=float(stride)))
    return RenderedViews(maps)


def _blob(cam: CameraModel, box: Box3D, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gaussian centered on the projected box center, spread over its projected extent."""
    uc, vc, zc = project_points(cam, np.asarray(box.center))
    if not zc > 0:
        return np.zeros_like(u)
    cu, cv, cz = project_points(cam, box.corners())
    front = cz > 0
    if front.sum() < 2:
        return np.zeros_like(u)
    su = max(0.5 * (cu[front].max() - cu[front].min()), 1.0)
    sv = max(0.5 * (cv[front].max() - cv[front].min()), 1.0)
    return np.exp(-0.5 * (((u - uc) / su) ** 2 + ((v - vc) / sv) ** 2))


def lidar_like(
    scene: Scene,
    rays: int = 1024,
    seed: int = 0,
    elevations_deg: Optional[Sequence[float]] = None,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
    ground_y: float = GROUND_Y,
    max_range: float = 60.0,
) -> LidarCloud:
    """Spinning-LiDAR stand-in: first hits on boxes, otherwise on the ground plane.

    ``rays`` azimuth samples per beam; the azimuth phase is drawn from ``seed``.
    """
    if rays <= 0:
        raise ValueError("rays must be positive")
    if elevations_deg is None:
        elevations_deg = np.linspace(-25.0, 5.0, 16)
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 1.0)
    az = 2 * np.pi * (np.arange(rays) + phase) / rays
    el = np.radians(np.asarray(elevations_deg, dtype=float))
    A, E = np.meshgrid(az, el)
    dirs = np.stack([np.cos(E) * np.sin(A), np.sin(E), np.cos(E) * np.cos(A)], axis=-1).reshape(-1, 3)
    o = np.asarray(origin, dtype=float)
    origins = np.broadcast_to(o, dirs.shape)

    t_box = ray_box_hits(origins, dirs, scene.boxes).min(axis=1) if scene.boxes else np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 1] < 0, (ground_y - o[1]) / dirs[:, 1], np.inf)
    t = np.minimum(t_box, t_ground)
    keep = np.isfinite(t) & (t <= max_range)
    pts = origins[keep] + dirs[keep] * t[keep, None]
    return LidarCloud(pts)
