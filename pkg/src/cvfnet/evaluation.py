"""KITTI-style average precision over BEV or 3D IoU."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .boxes import CLASS_NAMES, Box3D, boxes_to_array, iou_matrix
from .errors import ConfigurationError, UndefinedMetricError

# KITTI difficulty rules: min 2D box height (px), max occlusion level, max truncation
DIFFICULTY = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = (0.7, 0.5, 0.5)  # per class id: Car, Pedestrian, Cyclist
    recall_positions: int = 40
    iou_kind: str = "3d"
    difficulty: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        if any(not 0 < t <= 1 for t in self.iou_thresholds):
            raise ConfigurationError(f"IoU thresholds must lie in (0, 1]: {self.iou_thresholds}")
        if self.recall_positions not in (11, 40):
            raise ConfigurationError("recall_positions must be 11 or 40")
        if self.iou_kind not in ("bev", "3d"):
            raise ConfigurationError("iou_kind must be 'bev' or '3d'")
        if self.difficulty is not None and self.difficulty not in DIFFICULTY:
            raise ConfigurationError(f"unknown difficulty {self.difficulty!r}")


def gt_is_evaluated(box: Box3D, difficulty: Optional[str]) -> bool:
    if difficulty is None:
        return True
    min_h, max_occ, max_trunc = DIFFICULTY[difficulty]
    height = box.bbox2d[3] - box.bbox2d[1]
    return height >= min_h and box.occluded <= max_occ and box.truncated <= max_trunc


@dataclass
class SceneMatch:
    scores: np.ndarray     # per counted detection
    tp: np.ndarray         # bool per counted detection
    gt_matched: np.ndarray  # bool per gt
    n_gt: int              # gts counted for this class/difficulty


def match_scene(dets: Sequence[Box3D], gts: Sequence[Box3D], class_id: int, iou_threshold: float,
                iou_kind: str = "bev", difficulty: Optional[str] = None) -> SceneMatch:
    """Greedy matching for one class.

    Detections, in descending score order, take the unmatched gt of highest
    IoU if it reaches the threshold (tp), otherwise they are false positives.
    A detection whose best match is a gt excluded by the difficulty filter is
    dropped from the count instead.
    """
    dets = sorted([d for d in dets if d.class_id == class_id], key=lambda d: -(d.score or 0.0))
    gts = [g for g in gts if g.class_id == class_id]
    counted = np.array([gt_is_evaluated(g, difficulty) for g in gts], dtype=bool)
    iou = iou_matrix(boxes_to_array(dets), boxes_to_array(gts), kind=iou_kind)
    matched = np.zeros(len(gts), dtype=bool)
    scores, tps = [], []
    for i, det in enumerate(dets):
        cand = np.where(matched, -1.0, iou[i]) if len(gts) else np.zeros(0)
        j = int(cand.argmax()) if cand.size else -1
        if j >= 0 and cand[j] >= iou_threshold:
            matched[j] = True
            if not counted[j]:
                continue
            scores.append(det.score or 0.0)
            tps.append(True)
        else:
            scores.append(det.score or 0.0)
            tps.append(False)
    return SceneMatch(np.array(scores, dtype=np.float64), np.array(tps, dtype=bool),
                      matched, int(counted.sum()))


def recall_points(n: int) -> np.ndarray:
    if n == 11:
        return np.linspace(0.0, 1.0, 11)
    return np.arange(1, n + 1) / n


def average_precision(matches: Sequence[SceneMatch], n_gt: Optional[int] = None,
                      recall_positions: int = 40) -> float:
    if n_gt is None:
        n_gt = int(np.sum([m.n_gt for m in matches]))
    if n_gt < 1:
        raise UndefinedMetricError("average precision is undefined without ground truth")
    scores = np.concatenate([m.scores for m in matches]) if matches else np.zeros(0)
    tps = np.concatenate([m.tp for m in matches]) if matches else np.zeros(0, dtype=bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp_cum = np.cumsum(tps[order])
    fp_cum = np.cumsum(~tps[order])
    # operating points only where the score threshold can actually cut
    s = scores[order]
    cut = np.ones(s.size, dtype=bool)
    cut[:-1] = s[1:] != s[:-1]
    recall = tp_cum[cut] / n_gt
    precision = tp_cum[cut] / (tp_cum[cut] + fp_cum[cut])
    best = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in recall_points(recall_positions):
        reach = np.flatnonzero(recall >= r - 1e-12)
        if reach.size:
            ap += best[reach[0]]
    return float(ap / recall_positions)


def evaluate(pred: Dict[str, List[Box3D]], gt: Dict[str, List[Box3D]], cfg: EvalConfig,
             class_ids: Optional[Sequence[int]] = None) -> Dict[str, float]:
    """AP per class present in the ground truth, keyed ``AP_<class>_<kind>_R<n>``."""
    if class_ids is None:
        class_ids = sorted({b.class_id for boxes in gt.values() for b in boxes})
    out = {}
    for cid in class_ids:
        thr = cfg.iou_thresholds[cid]
        matches = [match_scene(pred.get(sid, []), gt[sid], cid, thr, cfg.iou_kind, cfg.difficulty)
                   for sid in sorted(gt)]
        key = f"AP_{CLASS_NAMES[cid]}_{cfg.iou_kind}_R{cfg.recall_positions}"
        try:
            out[key] = average_precision(matches, recall_positions=cfg.recall_positions)
        except UndefinedMetricError:
            out[key] = float("nan")
    return out


def write_report(metrics: Dict[str, float], out_dir) -> tuple:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = out_dir / "metrics.txt"
    kv = out_dir / "metrics.json"
    text.write_text("".join(f"{k}: {v:.4f}\n" for k, v in metrics.items()))
    kv.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return text, kv
