"""Center-distance detection metrics and the NuScenes-style detection score.

Simplified for synthetic data: no minimum recall/precision clipping, no
attribute taxonomy, per-class AP averaged with equal weight over the classes
that have ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bevgrid import Box3D
from .errors import DataError, NoMatches

__all__ = [
    "Detection",
    "EvalResult",
    "match",
    "tp_errors",
    "average_precision",
    "map_over",
    "nds",
    "evaluate",
    "DIST_THRESHOLDS",
    "TP_THRESHOLD",
    "save_detections_json",
    "load_detections_json",
]

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
TP_NAMES = ("mATE", "mASE", "mAOE", "mAVE", "mAAE")


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def class_id(self) -> int:
        return self.box.class_id


@dataclass
class EvalResult:
    mAP: float
    mATE: float
    mASE: float
    mAOE: float
    mAVE: float
    mAAE: float
    NDS: float = float("nan")

    def __post_init__(self):
        if math.isnan(self.NDS):
            self.NDS = nds(self)

    def to_dict(self) -> dict:
        return asdict(self)


def _bev_dist(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[2] - b.center[2])


def match(preds: Sequence[Detection], gts: Sequence[Box3D], dist_threshold: float) -> list[tuple[int, int]]:
    """Greedy matching in descending score order.

    Returns ``(pred_index, gt_index)`` pairs; each prediction takes the
    nearest unmatched ground truth of its class within ``dist_threshold``.
    Ties in score keep input order.
    """
    order = sorted(range(len(preds)), key=lambda k: -preds[k].score)
    taken = [False] * len(gts)
    pairs = []
    for k in order:
        p = preds[k]
        best, best_d = -1, math.inf
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != p.class_id:
                continue
            d = _bev_dist(p.box, g)
            if d < best_d:
                best, best_d = j, d
        if best >= 0 and best_d <= dist_threshold:
            taken[best] = True
            pairs.append((k, best))
    return pairs


def _wrap_angle(a: float) -> float:
    """Absolute angle difference folded into [0, pi]."""
    a = math.fmod(abs(a), 2 * math.pi)
    return 2 * math.pi - a if a > math.pi else a


def _aligned_iou(a: Sequence[float], b: Sequence[float]) -> float:
    inter = float(np.prod(np.minimum(a, b)))
    return inter / (float(np.prod(a)) + float(np.prod(b)) - inter)


def tp_errors(pairs, preds: Sequence[Detection], gts: Sequence[Box3D]) -> tuple[float, float, float, float, float]:
    """(ATE, ASE, AOE, AVE, AAE) averaged over matched pairs."""
    if not pairs:
        raise NoMatches("true-positive errors need at least one match")
    ate, ase, aoe, ave, correct = [], [], [], [], 0
    for k, j in pairs:
        p, g = preds[k].box, gts[j]
        ate.append(_bev_dist(p, g))
        ase.append(1.0 - _aligned_iou(p.size, g.size))
        aoe.append(_wrap_angle(p.yaw - g.yaw))
        ave.append(math.hypot(p.velocity[0] - g.velocity[0], p.velocity[1] - g.velocity[1]))
        correct += int(p.class_id == g.class_id)
    return (
        float(np.mean(ate)),
        float(np.mean(ase)),
        float(np.mean(aoe)),
        float(np.mean(ave)),
        1.0 - correct / len(pairs),
    )


def _pr_curve(scenes_preds, scenes_gts, class_id: int, dist_threshold: float):
    """Cumulative precision/recall over all scenes for one class."""
    n_gt = sum(sum(1 for g in gts if g.class_id == class_id) for gts in scenes_gts)
    entries = []  # (score, scene, pred index)
    for s, preds in enumerate(scenes_preds):
        for k, p in enumerate(preds):
            if p.class_id == class_id:
                entries.append((p.score, s, k))
    entries.sort(key=lambda e: -e[0])
    taken = [[False] * len(gts) for gts in scenes_gts]
    tp = np.zeros(len(entries))
    for n, (_, s, k) in enumerate(entries):
        p = scenes_preds[s][k]
        best, best_d = -1, math.inf
        for j, g in enumerate(scenes_gts[s]):
            if taken[s][j] or g.class_id != class_id:
                continue
            d = _bev_dist(p.box, g)
            if d < best_d:
                best, best_d = j, d
        if best >= 0 and best_d <= dist_threshold:
            taken[s][best] = True
            tp[n] = 1
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(entries) + 1)
    recall = ctp / n_gt if n_gt else np.zeros_like(ctp)
    return precision, recall, n_gt


def average_precision(scenes_preds, scenes_gts, class_id: int, dist_threshold: float) -> float:
    """Area under the monotone precision envelope for one class and threshold.

    ``scenes_preds``/``scenes_gts`` are per-scene lists; matching never crosses
    scene boundaries.
    """
    precision, recall, n_gt = _pr_curve(scenes_preds, scenes_gts, class_id, dist_threshold)
    if n_gt == 0 or precision.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def _classes(scenes_gts) -> list[int]:
    return sorted({g.class_id for gts in scenes_gts for g in gts})


def map_over(scenes_preds, scenes_gts, thresholds: Sequence[float] = DIST_THRESHOLDS) -> float:
    classes = _classes(scenes_gts)
    if not classes:
        return 0.0
    return float(np.mean([average_precision(scenes_preds, scenes_gts, c, t) for c in classes for t in thresholds]))


def nds(r) -> float:
    """Detection score: half mAP, half the clipped true-positive errors."""
    tps = [getattr(r, name) for name in TP_NAMES]
    if min(tps) < 0:
        raise ValueError("true-positive errors must be non-negative")
    return (5.0 * r.mAP + sum(1.0 - min(1.0, t) for t in tps)) / 10.0


def evaluate(scenes_preds, scenes_gts) -> EvalResult:
    """mAP over distance thresholds; TP errors per class at 2 m, then averaged.

    A class without any true positive contributes 1.0 to every TP error.
    """
    m = map_over(scenes_preds, scenes_gts)
    per_class = []
    for c in _classes(scenes_gts):
        preds_c, gts_c, pairs_c = [], [], []
        for preds, gts in zip(scenes_preds, scenes_gts):
            pc = [p for p in preds if p.class_id == c]
            gc = [g for g in gts if g.class_id == c]
            base_p, base_g = len(preds_c), len(gts_c)
            pairs_c += [(k + base_p, j + base_g) for k, j in match(pc, gc, TP_THRESHOLD)]
            preds_c += pc
            gts_c += gc
        per_class.append(tp_errors(pairs_c, preds_c, gts_c) if pairs_c else (1.0,) * 5)
    tp = np.mean(per_class, axis=0) if per_class else np.ones(5)
    return EvalResult(m, *(float(t) for t in tp))


def save_detections_json(dets: Sequence[Detection], path) -> None:
    Path(path).write_text(json.dumps([{**d.box.to_dict(), "score": d.score} for d in dets], indent=1))


def load_detections_json(path) -> list[Detection]:
    try:
        data = json.loads(Path(path).read_text())
        return [Detection(Box3D.from_dict(d), float(d.get("score", 1.0))) for d in data]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad detections file {path}: {exc}") from exc
