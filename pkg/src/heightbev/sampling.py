"""Height-driven feature gathering from camera feature maps into BEV queries.

Each BEV cell turns its ``(y, h)`` into a column of anchor heights, lifts
them to 3D reference points at the cell center, projects those into every
camera and bilinearly samples the feature maps. Valid samples are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .bevgrid import GridSpec, cell_to_world
from .errors import OutOfRange, ShapeMismatch
from .geometry import CameraModel, WorldPoint

__all__ = [
    "FeatureMap",
    "BevQueryGrid",
    "anchor_heights",
    "anchor_offsets",
    "reference_points",
    "bilinear_sample",
    "bilinear_gather",
    "aggregate",
    "aggregate_cells",
    "apply_query_mask",
]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense features of one camera, ``values[row, col, channel]``.

    Feature pixel ``(col, row)`` corresponds to image pixel
    ``(col * stride, row * stride)``.
    """

    camera_index: int
    values: np.ndarray
    stride: float = 1.0

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 3 or min(vals.shape) <= 0:
            raise ShapeMismatch(f"feature map must be (H, W, C) with positive dims, got {vals.shape}")
        if not self.stride > 0:
            raise ValueError("stride must be positive")
        vals = np.array(vals, copy=True)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class BevQueryGrid:
    features: np.ndarray  # (cells_x, cells_z, C)
    hits: np.ndarray  # (cells_x, cells_z)

    @property
    def channels(self) -> int:
        return self.features.shape[-1]


def anchor_offsets(n: int) -> np.ndarray:
    """Unit-extent offsets in [-0.5, 0.5], exactly symmetric about zero."""
    if n < 1:
        raise ValueError("need at least one anchor")
    if n == 1:
        return np.zeros(1)
    k = np.arange(n, dtype=float)
    return (2.0 * k - (n - 1)) / (2.0 * (n - 1))


def anchor_heights(y: float, h: float, n: int) -> np.ndarray:
    """``n`` heights spread evenly over ``[y - h/2, y + h/2]``, endpoints included."""
    if h < 0:
        raise ValueError("extent must be non-negative")
    return y + h * anchor_offsets(n)


def reference_points(g: GridSpec, cell: tuple[int, int], anchors) -> list[WorldPoint]:
    x, z = cell_to_world(g, *cell)
    return [WorldPoint(x, float(a), z) for a in anchors]


def bilinear_gather(values: np.ndarray, fu: np.ndarray, fv: np.ndarray):
    """Sample ``values`` (H, W, C) at feature-pixel coordinates.

    Returns ``(samples, valid)`` where samples has shape ``fu.shape + (C,)``
    and is zero wherever ``valid`` is False.
    """
    H, W, C = values.shape
    fu = np.asarray(fu, dtype=float)
    fv = np.asarray(fv, dtype=float)
    valid = (fu >= 0) & (fu <= W - 1) & (fv >= 0) & (fv <= H - 1)
    out = np.zeros(fu.shape + (C,))
    if not valid.any():
        return out, valid
    u = fu[valid]
    v = fv[valid]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = (u - x0)[:, None]
    ay = (v - y0)[:, None]
    top = values[y0, x0] * (1.0 - ax) + values[y0, x1] * ax
    bottom = values[y1, x0] * (1.0 - ax) + values[y1, x1] * ax
    out[valid] = top * (1.0 - ay) + bottom * ay
    return out, valid


def bilinear_sample(fm: FeatureMap, u: float, v: float) -> Optional[np.ndarray]:
    """Feature vector at image pixel ``(u, v)``, or None outside the map."""
    samples, valid = bilinear_gather(fm.values, np.array([u / fm.stride]), np.array([v / fm.stride]))
    return samples[0] if valid[0] else None


def _sorted_views(cams: Sequence[CameraModel], fms: Sequence[FeatureMap]):
    if len(cams) != len(fms):
        raise ShapeMismatch(f"{len(cams)} cameras but {len(fms)} feature maps")
    order = sorted(range(len(fms)), key=lambda k: fms[k].camera_index)
    return [(cams[k], fms[k]) for k in order]


def aggregate_cells(
    g: GridSpec,
    y: np.ndarray,
    h: np.ndarray,
    ci: np.ndarray,
    cj: np.ndarray,
    cams: Sequence[CameraModel],
    fms: Sequence[FeatureMap],
    n_anchors: int = 4,
):
    """Gather features for the cells ``(ci[k], cj[k])`` with heights ``y[k], h[k]``.

    Returns ``(features (N, C), hits (N,))``. Cameras are visited in
    ``camera_index`` order so the result does not depend on list order.
    """
    views = _sorted_views(cams, fms)
    ci = np.asarray(ci)
    cj = np.asarray(cj)
    n = ci.shape[0]
    channels = views[0][1].channels if views else 0
    feats = np.zeros((n, channels))
    hits = np.zeros(n, dtype=np.int64)
    if n == 0 or not views:
        return feats, hits
    x = g.origin[0] + (ci + 0.5) * g.cell_size
    z = g.origin[1] + (cj + 0.5) * g.cell_size
    anchors = np.asarray(y, dtype=float)[:, None] + np.asarray(h, dtype=float)[:, None] * anchor_offsets(n_anchors)
    pts = np.stack(np.broadcast_arrays(x[:, None], anchors, z[:, None]), axis=-1)  # (N, A, 3)
    for cam, fm in views:
        cam_pts = cam.to_camera(pts)
        depth = cam_pts[..., 2]
        front = depth > 0
        safe = np.where(front, depth, 1.0)
        u = cam.fx * cam_pts[..., 0] / safe + cam.u0
        v = cam.fy * cam_pts[..., 1] / safe + cam.v0
        fu = np.where(front, u / fm.stride, -1.0)
        fv = np.where(front, v / fm.stride, -1.0)
        samples, valid = bilinear_gather(fm.values, fu, fv)
        for a in range(n_anchors):
            feats += samples[:, a]
        hits += valid.sum(axis=1)
    nz = hits > 0
    feats[nz] /= hits[nz, None]
    return feats, hits


def aggregate(
    g: GridSpec,
    heights,
    cams: Sequence[CameraModel],
    fms: Sequence[FeatureMap],
    n_anchors: int = 4,
    chunk: int = 8192,
) -> BevQueryGrid:
    """Gather BEV queries for the whole grid.

    ``heights`` is anything exposing per-cell ``y`` and ``h`` arrays, e.g. a
    :class:`HeightMap` (whose empty cells already carry the full-range
    sentinel) or decoded predictor output.
    """
    y = np.asarray(heights.y, dtype=float)
    h = np.asarray(heights.h, dtype=float)
    if y.shape != g.shape or h.shape != g.shape:
        raise ShapeMismatch(f"heights shaped {y.shape}, grid is {g.shape}")
    ci, cj = np.meshgrid(np.arange(g.cells_x), np.arange(g.cells_z), indexing="ij")
    ci, cj, yf, hf = ci.ravel(), cj.ravel(), y.ravel(), h.ravel()
    parts_f, parts_h = [], []
    for s in range(0, ci.size, chunk):
        f, k = aggregate_cells(g, yf[s : s + chunk], hf[s : s + chunk], ci[s : s + chunk], cj[s : s + chunk], cams, fms, n_anchors)
        parts_f.append(f)
        parts_h.append(k)
    feats = np.concatenate(parts_f).reshape(g.shape + (-1,))
    hits = np.concatenate(parts_h).reshape(g.shape)
    return BevQueryGrid(feats, hits)


def apply_query_mask(q: BevQueryGrid, logits: np.ndarray, tau: float = 0.25) -> BevQueryGrid:
    """Zero the queries whose segmentation probability falls below ``tau``."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    logits = np.asarray(logits, dtype=float)
    if logits.shape != q.hits.shape:
        raise ShapeMismatch(f"logits shaped {logits.shape}, queries {q.hits.shape}")
    drop = expit(logits) < tau
    feats = np.where(drop[..., None], 0.0, q.features)
    hits = np.where(drop, 0, q.hits)
    return BevQueryGrid(feats, hits)
