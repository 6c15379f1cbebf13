"""Pinhole projection and the depth/height misplacement bounds.

World points use ``y`` as the height axis; ``(x, z)`` spans the BEV plane.
A camera's pose maps world coordinates into its own frame,
``p_cam = R @ p_world + t``, after which the intrinsics apply::

    u = fx * x / z + u0
    v = fy * y / z + v0

The two closed-form bounds describe how far a depth (resp. height) estimate
may drift before the gathered feature leaves the Manhattan
``epsilon``-neighbourhood of the true BEV position. Both carry the common
factor ``fx / (|u - u0| + fx)``, which is what makes height and depth
supervision interchangeable up to the per-pixel ratio ``|v - v0| / fy``.

The ``verify_*`` functions are brute-force oracles that recover the same
maxima by bisection over exact rational arithmetic, without using either
closed form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError, InvalidCamera, InvalidQuery, NonPositiveDepth

__all__ = [
    "CameraModel",
    "PixelPoint",
    "WorldPoint",
    "BoundQuery",
    "project",
    "unproject",
    "project_points",
    "depth_error_bound",
    "height_error_bound",
    "verify_depth_bound",
    "verify_height_bound",
    "random_queries",
    "rotation_about_y",
]

_ORTHO_TOL = 1e-9


class PixelPoint(NamedTuple):
    u: float
    v: float
    depth: float


class WorldPoint(NamedTuple):
    x: float
    y: float
    z: float


def rotation_about_y(angle: float) -> np.ndarray:
    """Rotation matrix about the height axis.

    ``angle = 0`` leaves the frame unchanged; positive angles turn the +z axis
    toward +x.
    """
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Intrinsics plus a rigid world-to-camera pose.

    Attributes:
        fx, fy: focal lengths in pixels.
        u0, v0: principal point in pixels.
        width, height: image size in pixels.
        rotation: 3x3 world-to-camera rotation.
        translation: world-to-camera translation in meters.
    """

    fx: float
    fy: float
    u0: float
    v0: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCamera(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidCamera("image size must be positive")
        if not (0 <= self.u0 < self.width and 0 <= self.v0 < self.height):
            raise InvalidCamera("principal point outside the image")
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=_ORTHO_TOL, rtol=0.0):
            raise InvalidCamera("rotation is not orthonormal")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidCamera("pose must be finite")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.u0], [0.0, self.fy, self.v0], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.rotation.T + self.translation

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.translation) @ self.rotation

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "u0": float(self.u0),
            "v0": float(self.v0),
            "width": int(self.width),
            "height": int(self.height),
            "rotation": [float(r) for r in self.rotation.ravel()],
            "translation": [float(t) for t in self.translation],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        try:
            return cls(
                fx=float(data["fx"]),
                fy=float(data["fy"]),
                u0=float(data["u0"]),
                v0=float(data["v0"]),
                width=int(data["width"]),
                height=int(data["height"]),
                rotation=np.array(data.get("rotation", np.eye(3).ravel()), dtype=float).reshape(3, 3),
                translation=np.array(data.get("translation", [0.0, 0.0, 0.0]), dtype=float).reshape(3),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidCamera):
                raise
            raise DataError(f"bad camera calibration: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "CameraModel":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read calibration {path}: {exc}") from exc
        return cls.from_dict(data)


def project(camera: CameraModel, p) -> PixelPoint:
    """Project one world point to pixel coordinates plus camera-frame depth."""
    x, y, z = camera.to_camera(np.asarray(p, dtype=float))
    if z <= 0:
        raise NonPositiveDepth(f"camera-frame depth {z} is not positive")
    return PixelPoint(camera.fx * x / z + camera.u0, camera.fy * y / z + camera.v0, float(z))


def unproject(camera: CameraModel, px) -> WorldPoint:
    """Inverse of :func:`project` for a pixel with known depth."""
    u, v, depth = px
    if depth <= 0:
        raise NonPositiveDepth(f"depth {depth} is not positive")
    cam = np.array([(u - camera.u0) * depth / camera.fx, (v - camera.v0) * depth / camera.fy, depth])
    return WorldPoint(*(float(c) for c in camera.to_world(cam)))


def project_points(camera: CameraModel, pts: np.ndarray):
    """Vectorized projection of ``(..., 3)`` world points.

    Returns ``(u, v, depth)`` arrays. Points with non-positive depth get NaN
    pixel coordinates instead of raising.
    """
    cam = camera.to_camera(pts)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        front = z > 0
        u = np.where(front, camera.fx * cam[..., 0] / z + camera.u0, np.nan)
        v = np.where(front, camera.fy * cam[..., 1] / z + camera.v0, np.nan)
    return u, v, z


@dataclass(frozen=True)
class BoundQuery:
    camera: CameraModel
    u_gt: float
    v_gt: float
    gt_depth: float
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidQuery(f"epsilon must be positive, got {self.epsilon}")
        if not self.gt_depth > 0:
            raise InvalidQuery(f"gt_depth must be positive, got {self.gt_depth}")


def _shared_factor(q: BoundQuery) -> float:
    fx = q.camera.fx
    return fx / (abs(q.u_gt - q.camera.u0) + fx)


def depth_error_bound(q: BoundQuery) -> float:
    """Largest depth error that keeps the feature inside the epsilon-neighbourhood."""
    return q.epsilon * _shared_factor(q)


def height_error_bound(q: BoundQuery) -> float:
    """Largest height error that keeps ``(u_gt, v_gt)`` inside the sampled set."""
    return q.epsilon * (abs(q.v_gt - q.camera.v0) / q.camera.fy) * _shared_factor(q)


# --- brute-force oracles -------------------------------------------------------


class _Exact(NamedTuple):
    fx: Fraction
    fy: Fraction
    u0: Fraction
    v0: Fraction
    u: Fraction
    v: Fraction
    d: Fraction
    eps: Fraction


def _exact(q: BoundQuery) -> _Exact:
    c = q.camera
    return _Exact(*(Fraction(float(a)) for a in (c.fx, c.fy, c.u0, c.v0, q.u_gt, q.v_gt, q.gt_depth, q.epsilon)))


def _in_neighbourhood(e: _Exact, x, z, x_gt, z_gt) -> bool:
    return abs(x - x_gt) + abs(z - z_gt) <= e.eps


def _depth_member(e: _Exact, delta: Fraction) -> bool:
    x_gt = (e.u - e.u0) * e.d / e.fx
    for d in (e.d + delta, e.d - delta):
        if d <= 0:
            return False
        # back-project the ground-truth pixel at the perturbed depth
        x = (e.u - e.u0) * d / e.fx
        if not _in_neighbourhood(e, x, d, x_gt, e.d):
            return False
    return True


def _height_member(e: _Exact, delta: Fraction) -> bool:
    x_gt = (e.u - e.u0) * e.d / e.fx
    y_gt = (e.v - e.v0) * e.d / e.fy
    for y in (y_gt + delta, y_gt - delta):
        # the only grid cells that sample (u_gt, v_gt) at height y lie on the
        # ground-truth pixel ray; find that cell, then test it.
        if e.v == e.v0:
            if y != 0:
                return False
            z = e.d
        else:
            z = y * e.fy / (e.v - e.v0)
        if z <= 0:
            return False
        x = (e.u - e.u0) * z / e.fx
        if not _in_neighbourhood(e, x, z, x_gt, e.d):
            return False
        if (e.fx * x / z + e.u0, e.fy * y / z + e.v0) != (e.u, e.v):
            return False
    return True


def _bisect_max(member, eps: Fraction, steps: int) -> float:
    if steps < 1000:
        raise InvalidQuery("oracle needs steps >= 1000")
    if not member(Fraction(0)):
        return 0.0
    # bracket the boundary within a factor of two so the bisection
    # resolution is relative to the answer, not to eps
    lo, hi = Fraction(0), eps
    if member(hi):
        for _ in range(64):
            lo, hi = hi, hi * 2
            if not member(hi):
                break
        else:
            return math.inf
    else:
        for _ in range(200):
            if member(hi / 2):
                lo = hi / 2
                break
            hi /= 2
        else:
            return 0.0
    for _ in range(max(20, math.ceil(math.log2(steps)))):
        mid = (lo + hi) / 2
        if member(mid):
            lo = mid
        else:
            hi = mid
    return float(lo)


def verify_depth_bound(q: BoundQuery, steps: int = 10_000) -> float:
    """Empirical maximum depth error, found by bisection on the membership test."""
    e = _exact(q)
    return _bisect_max(lambda delta: _depth_member(e, delta), e.eps, steps)


def verify_height_bound(q: BoundQuery, steps: int = 10_000) -> float:
    """Empirical maximum height error, found by bisection on the membership test."""
    e = _exact(q)
    return _bisect_max(lambda delta: _height_member(e, delta), e.eps, steps)


def random_queries(n: int, seed: int = 0) -> list[BoundQuery]:
    """Seeded random queries, one independent RNG stream per query."""
    queries = []
    for child in np.random.SeedSequence(seed).spawn(n):
        rng = np.random.default_rng(child)
        width = int(rng.integers(640, 1921))
        height = int(rng.integers(360, 1081))
        camera = CameraModel(
            fx=float(rng.uniform(300, 2000)),
            fy=float(rng.uniform(300, 2000)),
            u0=float(rng.uniform(0.4, 0.6) * width),
            v0=float(rng.uniform(0.4, 0.6) * height),
            width=width,
            height=height,
        )
        queries.append(
            BoundQuery(
                camera=camera,
                u_gt=float(rng.uniform(0, width)),
                v_gt=float(rng.uniform(0, height)),
                gt_depth=float(rng.uniform(5.0, 80.0)),
                epsilon=float(rng.uniform(0.05, 2.0)),
            )
        )
    return queries
