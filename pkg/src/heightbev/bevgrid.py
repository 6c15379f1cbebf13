"""BEV grid, ground-truth height maps and centerness weights.

Cells are indexed ``(i, j)`` with ``i`` along world ``x`` and ``j`` along
world ``z``. Arrays holding per-cell values therefore have shape
``(cells_x, cells_z)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, GridMismatch, OutOfRange

__all__ = [
    "GridSpec",
    "Box3D",
    "HeightMap",
    "LidarCloud",
    "world_to_cell",
    "cell_to_world",
    "box_footprint_mask",
    "heightmap_from_boxes",
    "heightmap_from_lidar",
    "fuse_heightmaps",
    "centerness_weights",
    "save_heightmap_csv",
    "load_heightmap_csv",
    "save_heightmap_pgm",
    "write_pgm",
    "read_pgm",
    "save_boxes_json",
    "load_boxes_json",
]


@dataclass(frozen=True)
class GridSpec:
    cells_x: int = 200
    cells_z: int = 200
    cell_size: float = 0.512
    origin: tuple[float, float] = (-51.2, -51.2)
    height_range: tuple[float, float] = (-5.0, 3.0)

    def __post_init__(self):
        if self.cells_x <= 0 or self.cells_z <= 0:
            raise ValueError("grid needs at least one cell per axis")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if not self.height_range[0] < self.height_range[1]:
            raise ValueError("height_range must be increasing")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "height_range", tuple(float(h) for h in self.height_range))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.cells_x, self.cells_z)

    @property
    def y_span(self) -> float:
        return self.height_range[1] - self.height_range[0]

    @property
    def sentinel(self) -> tuple[float, float]:
        """(y, h) for cells without annotation: the whole height range."""
        lo, hi = self.height_range
        return (0.5 * (lo + hi), hi - lo)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World ``(x, z)`` of every cell center, each shaped like the grid."""
        xs = self.origin[0] + (np.arange(self.cells_x) + 0.5) * self.cell_size
        zs = self.origin[1] + (np.arange(self.cells_z) + 0.5) * self.cell_size
        return np.meshgrid(xs, zs, indexing="ij")

    def to_dict(self) -> dict:
        return {
            "cells_x": self.cells_x,
            "cells_z": self.cells_z,
            "cell_size": self.cell_size,
            "origin": list(self.origin),
            "height_range": list(self.height_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            cells_x=int(d["cells_x"]),
            cells_z=int(d["cells_z"]),
            cell_size=float(d["cell_size"]),
            origin=tuple(d["origin"]),
            height_range=tuple(d["height_range"]),
        )


@dataclass(frozen=True)
class Box3D:
    """Oriented box. ``size = (w, h, l)``: w along local x, h along y, l along local z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    class_id: int = 0
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        if len(self.center) != 3 or len(self.size) != 3 or len(self.velocity) != 2:
            raise ValueError("box needs 3 center, 3 size and 2 velocity values")
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")

    def footprint(self) -> np.ndarray:
        """BEV corners ``(4, 2)`` in (x, z), counter-clockwise in the local frame."""
        w, _, l = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[-w / 2, -l / 2], [w / 2, -l / 2], [w / 2, l / 2], [-w / 2, l / 2]])
        # local (a, b) -> world x = c*a + s*b, z = -s*a + c*b
        rot = np.array([[c, s], [-s, c]])
        return local @ rot.T + np.array([self.center[0], self.center[2]])

    def corners(self) -> np.ndarray:
        """The eight 3D corners, shape ``(8, 3)``."""
        fp = self.footprint()
        y0 = self.center[1] - self.size[1] / 2
        y1 = self.center[1] + self.size[1] / 2
        bottom = np.column_stack([fp[:, 0], np.full(4, y0), fp[:, 1]])
        top = np.column_stack([fp[:, 0], np.full(4, y1), fp[:, 1]])
        return np.vstack([bottom, top])

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "size": list(self.size),
            "yaw": float(self.yaw),
            "class_id": int(self.class_id),
            "velocity": list(self.velocity),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(
            center=tuple(d["center"]),
            size=tuple(d["size"]),
            yaw=float(d.get("yaw", 0.0)),
            class_id=int(d.get("class_id", 0)),
            velocity=tuple(d.get("velocity", (0.0, 0.0))),
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HeightMap:
    """Per-cell center height ``y``, vertical extent ``h`` and occupancy indicator.

    ``owner`` holds the index of the box that claimed each cell, or -1. It is
    only meaningful for maps built from boxes.
    """

    grid: GridSpec
    y: np.ndarray
    h: np.ndarray
    indicator: np.ndarray
    owner: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = self.grid.shape
        for name in ("y", "h", "indicator"):
            arr = getattr(self, name)
            if np.shape(arr) != shape:
                raise GridMismatch(f"{name} has shape {np.shape(arr)}, grid is {shape}")
        object.__setattr__(self, "y", _frozen(np.asarray(self.y, dtype=float)))
        object.__setattr__(self, "h", _frozen(np.asarray(self.h, dtype=float)))
        object.__setattr__(self, "indicator", _frozen(np.asarray(self.indicator, dtype=np.uint8)))
        owner = self.owner if self.owner is not None else np.full(shape, -1)
        object.__setattr__(self, "owner", _frozen(np.asarray(owner, dtype=np.int64)))

    @classmethod
    def empty(cls, grid: GridSpec) -> "HeightMap":
        y, h = grid.sentinel
        return cls(grid, np.full(grid.shape, y), np.full(grid.shape, h), np.zeros(grid.shape, np.uint8))

    def __eq__(self, other):
        if not isinstance(other, HeightMap):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.h, other.h)
            and np.array_equal(self.indicator, other.indicator)
        )


@dataclass(frozen=True)
class LidarCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("lidar points must be finite")
        object.__setattr__(self, "points", _frozen(pts))


def world_to_cell(g: GridSpec, x: float, z: float) -> Optional[tuple[int, int]]:
    """Cell containing ``(x, z)``, or None when outside the grid."""
    i = math.floor((x - g.origin[0]) / g.cell_size)
    j = math.floor((z - g.origin[1]) / g.cell_size)
    if 0 <= i < g.cells_x and 0 <= j < g.cells_z:
        return (i, j)
    return None


def cell_to_world(g: GridSpec, i: int, j: int) -> tuple[float, float]:
    if not (0 <= i < g.cells_x and 0 <= j < g.cells_z):
        raise OutOfRange(f"cell ({i}, {j}) outside {g.shape} grid")
    return (g.origin[0] + (i + 0.5) * g.cell_size, g.origin[1] + (j + 0.5) * g.cell_size)


def box_footprint_mask(g: GridSpec, box: Box3D) -> np.ndarray:
    """Cells whose center lies inside the box's rotated BEV rectangle."""
    xs, zs = g.centers()
    dx = xs - box.center[0]
    dz = zs - box.center[2]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # world -> local is the transpose of the footprint rotation
    a = c * dx - s * dz
    b = s * dx + c * dz
    w, _, l = box.size
    return (np.abs(a) <= w / 2) & (np.abs(b) <= l / 2)


def heightmap_from_boxes(g: GridSpec, boxes: Sequence[Box3D]) -> HeightMap:
    """Rasterize boxes into a height map; every covered cell takes its box's (y, h).

    Where footprints overlap, the box whose center is nearest to the cell
    center wins.
    """
    sy, sh = g.sentinel
    y = np.full(g.shape, sy)
    h = np.full(g.shape, sh)
    ind = np.zeros(g.shape, np.uint8)
    owner = np.full(g.shape, -1, dtype=np.int64)
    best = np.full(g.shape, np.inf)
    xs, zs = g.centers()
    for k, box in enumerate(boxes):
        mask = box_footprint_mask(g, box)
        if not mask.any():
            continue
        dist = np.hypot(xs - box.center[0], zs - box.center[2])
        take = mask & (dist < best)
        best[take] = dist[take]
        y[take] = box.center[1]
        h[take] = box.size[1]
        ind[take] = 1
        owner[take] = k
    return HeightMap(g, y, h, ind, owner)


def heightmap_from_lidar(g: GridSpec, cloud: LidarCloud, intervals: int = 16) -> HeightMap:
    """Height map from point heights.

    Per occupied cell the height range is split into ``intervals`` equal
    bins. ``y`` is the center of the most populated bin (lowest bin on ties),
    and the lowest point marks ``y - h/2``. Points outside the grid or the
    height range are ignored. ``h`` is clipped so that it is never negative
    and ``y + h/2`` stays inside the range.
    """
    if intervals < 2:
        raise ValueError("need at least two height intervals")
    lo, hi = g.height_range
    width = (hi - lo) / intervals
    pts = cloud.points
    i = np.floor((pts[:, 0] - g.origin[0]) / g.cell_size).astype(np.int64)
    j = np.floor((pts[:, 2] - g.origin[1]) / g.cell_size).astype(np.int64)
    keep = (i >= 0) & (i < g.cells_x) & (j >= 0) & (j < g.cells_z) & (pts[:, 1] >= lo) & (pts[:, 1] <= hi)
    i, j, py = i[keep], j[keep], pts[keep, 1]
    bins = np.minimum(np.floor((py - lo) / width).astype(np.int64), intervals - 1)

    flat = i * g.cells_z + j
    counts = np.zeros((g.cells_x * g.cells_z, intervals), dtype=np.int64)
    np.add.at(counts, (flat, bins), 1)
    lowest = np.full(g.cells_x * g.cells_z, np.inf)
    np.minimum.at(lowest, flat, py)

    occupied = counts.sum(axis=1) > 0
    mode = np.argmax(counts, axis=1)  # first maximum, i.e. lowest bin on ties
    y_mode = lo + (mode + 0.5) * width
    h_lidar = 2.0 * (y_mode - lowest)
    h_lidar = np.clip(h_lidar, 0.0, 2.0 * (hi - y_mode))

    sy, sh = g.sentinel
    y = np.where(occupied, y_mode, sy).reshape(g.shape)
    h = np.where(occupied, h_lidar, sh).reshape(g.shape)
    return HeightMap(g, y, h, occupied.reshape(g.shape).astype(np.uint8))


def fuse_heightmaps(from_boxes: HeightMap, from_lidar: HeightMap) -> HeightMap:
    """Box heights where available, otherwise LiDAR heights."""
    if from_boxes.grid != from_lidar.grid:
        raise GridMismatch("height maps are defined on different grids")
    b = from_boxes.indicator.astype(bool)
    return HeightMap(
        from_boxes.grid,
        np.where(b, from_boxes.y, from_lidar.y),
        np.where(b, from_boxes.h, from_lidar.h),
        np.where(b, 1, from_lidar.indicator),
        np.where(b, from_boxes.owner, -1),
    )


def centerness_weights(g: GridSpec) -> np.ndarray:
    """Loss weights growing linearly from 1 at the ego origin to 2 at the farthest cell."""
    xs, zs = g.centers()
    d = np.hypot(xs, zs)
    return 1.0 + d / d.max()


# --- file formats --------------------------------------------------------------


def save_heightmap_csv(hm: HeightMap, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["i", "j", "indicator", "y_m", "h_m"])
        for i in range(hm.grid.cells_x):
            for j in range(hm.grid.cells_z):
                w.writerow([i, j, int(hm.indicator[i, j]), repr(float(hm.y[i, j])), repr(float(hm.h[i, j]))])


def load_heightmap_csv(path, grid: GridSpec) -> HeightMap:
    y = np.zeros(grid.shape)
    h = np.zeros(grid.shape)
    ind = np.zeros(grid.shape, np.uint8)
    try:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                i, j = int(row["i"]), int(row["j"])
                ind[i, j] = int(row["indicator"])
                y[i, j] = float(row["y_m"])
                h[i, j] = float(row["h_m"])
    except (OSError, KeyError, ValueError, IndexError) as exc:
        raise DataError(f"bad height map CSV {path}: {exc}") from exc
    return HeightMap(grid, y, h, ind)


def heightmap_to_gray(hm: HeightMap) -> np.ndarray:
    """8-bit image of ``y``: height range mapped linearly to 0..255, empty cells 0.

    Row ``r`` of the image is ``j = cells_z - 1 - r`` so that +z points up.
    """
    lo, hi = hm.grid.height_range
    val = np.rint((hm.y - lo) / (hi - lo) * 255.0)
    val = np.clip(val, 0, 255).astype(np.uint8)
    val[hm.indicator == 0] = 0
    return val.T[::-1]


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    rows, cols = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DataError(f"{path} is not an 8-bit binary PGM")
    cols, rows = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1 : pos + 1 + rows * cols], dtype=np.uint8).reshape(rows, cols)


def save_heightmap_pgm(hm: HeightMap, path) -> None:
    write_pgm(path, heightmap_to_gray(hm))


def save_boxes_json(boxes: Sequence[Box3D], path) -> None:
    Path(path).write_text(json.dumps([b.to_dict() for b in boxes], indent=1))


def load_boxes_json(path) -> list[Box3D]:
    try:
        data = json.loads(Path(path).read_text())
        return [Box3D.from_dict(d) for d in data]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad boxes file {path}: {exc}") from exc
