"""Oriented 3D boxes: rotated BEV / 3D IoU, anchor-relative coding, NMS.

Boxes are ``(x, y, z, w, l, h, yaw)`` with ``(x, y, z)`` the geometric
center, ``l`` measured along the heading and ``w`` across it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")


def normalize_angle(a):
    """Wrap into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float  # noqa: E741
    h: float
    yaw: float
    class_id: int = 0
    score: Optional[float] = None
    truncated: float = 0.0
    occluded: int = 0
    bbox2d: tuple = field(default=(0.0, 0.0, 0.0, 0.0))

    def __post_init__(self):
        for name in ("x", "y", "z", "w", "l", "h"):
            setattr(self, name, float(getattr(self, name)))
        self.class_id = int(self.class_id)
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise DomainError(f"box sizes must be positive, got w={self.w} l={self.l} h={self.h}")
        self.yaw = float(normalize_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, a, class_id: int = 0, score=None) -> "Box3D":
        a = [float(v) for v in a]
        return cls(*a[:7], class_id=int(class_id), score=None if score is None else float(score))


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def bev_corners(box) -> list:
    """Counter-clockwise BEV corners of one box as a list of (x, y)."""
    x, y, _, w, l, _, yaw = (float(v) for v in box[:7])
    c, s = math.cos(yaw), math.sin(yaw)
    out = []
    for dx, dy in ((0.5 * l, 0.5 * w), (-0.5 * l, 0.5 * w), (-0.5 * l, -0.5 * w), (0.5 * l, -0.5 * w)):
        out.append((x + c * dx - s * dy, y + s * dx + c * dy))
    return out


def bev_corners_array(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    local = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])
    dx = local[None, :, 0] * boxes[:, None, 4]
    dy = local[None, :, 1] * boxes[:, None, 3]
    c, s = np.cos(boxes[:, 6])[:, None], np.sin(boxes[:, 6])[:, None]
    return np.stack([boxes[:, None, 0] + c * dx - s * dy, boxes[:, None, 1] + s * dx + c * dy], axis=-1)


def polygon_area(poly) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_polygon(subject, clip) -> list:
    """Sutherland-Hodgman: part of ``subject`` inside the convex CCW polygon ``clip``."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if side >= 0:
                if prev_side < 0:
                    out.append(_cross_point(prev, cur, prev_side, side))
                out.append(cur)
            elif prev_side >= 0:
                out.append(_cross_point(prev, cur, prev_side, side))
            prev, prev_side = cur, side
    return out


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a, b) -> float:
    poly = clip_polygon(bev_corners(a), bev_corners(b))
    return max(polygon_area(poly), 0.0)


def _arr(b):
    return b.as_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64)


def rotated_iou_bev(a, b) -> float:
    a, b = _arr(a), _arr(b)
    area_a, area_b = a[3] * a[4], b[3] * b[4]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = bev_intersection(a, b)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a, b) -> float:
    a, b = _arr(a), _arr(b)
    vol_a, vol_b = a[3] * a[4] * a[5], b[3] * b[4] * b[5]
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    zo = min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    if zo <= 0:
        return 0.0
    inter = bev_intersection(a, b) * zo
    union = vol_a + vol_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def _candidate_pairs(a: np.ndarray, b: np.ndarray) -> tuple:
    ra = 0.5 * np.hypot(a[:, 3], a[:, 4])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 4])
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    return np.nonzero(d < ra[:, None] + rb[None, :])


def iou_matrix(a: np.ndarray, b: np.ndarray, kind: str = "bev") -> np.ndarray:
    """Pairwise IoU; pairs whose circumcircles are disjoint are skipped (IoU 0)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((a.shape[0], b.shape[0]))
    if out.size == 0:
        return out
    fn = rotated_iou_bev if kind == "bev" else iou_3d
    for i, j in zip(*_candidate_pairs(a, b)):
        out[i, j] = fn(a[i], b[j])
    return out


def points_in_box(points: np.ndarray, box, eps: float = 1e-6) -> np.ndarray:
    """Boolean mask of points inside the (slightly inflated) box."""
    b = _arr(box)
    p = np.asarray(points, dtype=np.float64)[:, :3] - b[:3]
    c, s = math.cos(b[6]), math.sin(b[6])
    lx = c * p[:, 0] + s * p[:, 1]
    ly = -s * p[:, 0] + c * p[:, 1]
    return ((np.abs(lx) <= b[4] / 2 + eps) & (np.abs(ly) <= b[3] / 2 + eps)
            & (np.abs(p[:, 2]) <= b[5] / 2 + eps))


def points_in_footprint(points: np.ndarray, box, eps: float = 0.0) -> np.ndarray:
    b = _arr(box)
    p = np.asarray(points, dtype=np.float64)[:, :2] - b[:2]
    c, s = math.cos(b[6]), math.sin(b[6])
    lx = c * p[:, 0] + s * p[:, 1]
    ly = -s * p[:, 0] + c * p[:, 1]
    return (np.abs(lx) <= b[4] / 2 + eps) & (np.abs(ly) <= b[3] / 2 + eps)


# ---------------------------------------------------------------------------
# anchor-relative coding
# ---------------------------------------------------------------------------

def encode_boxes(gt: np.ndarray, anchors: np.ndarray):
    """Residuals of ``gt`` w.r.t. ``anchors`` plus the direction bit.

    The bit is 1 when the heading points away from the anchor's
    (``cos(yaw_gt - yaw_anchor) < 0``); the sine residual alone cannot
    tell those cases apart.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    an = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    if np.any(gt[:, 3:6] <= 0) or np.any(an[:, 3:6] <= 0):
        raise DomainError("box and anchor sizes must be positive")
    d = np.hypot(an[:, 3], an[:, 4])
    dyaw = gt[:, 6] - an[:, 6]
    res = np.stack([
        (gt[:, 0] - an[:, 0]) / d,
        (gt[:, 1] - an[:, 1]) / d,
        (gt[:, 2] - an[:, 2]) / an[:, 5],
        np.log(gt[:, 3] / an[:, 3]),
        np.log(gt[:, 4] / an[:, 4]),
        np.log(gt[:, 5] / an[:, 5]),
        np.sin(dyaw),
    ], axis=1)
    direction = (np.cos(dyaw) < 0).astype(np.int64)
    return res, direction


def decode_boxes(res: np.ndarray, anchors: np.ndarray, direction=None) -> np.ndarray:
    res = np.asarray(res, dtype=np.float64).reshape(-1, 7)
    an = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    if np.any(an[:, 3:6] <= 0):
        raise DomainError("anchor sizes must be positive")
    d = np.hypot(an[:, 3], an[:, 4])
    dyaw = np.arcsin(np.clip(res[:, 6], -1.0, 1.0))
    if direction is not None:
        flip = np.asarray(direction).reshape(-1).astype(bool)
        dyaw = np.where(flip, np.pi - dyaw, dyaw)
    return np.stack([
        res[:, 0] * d + an[:, 0],
        res[:, 1] * d + an[:, 1],
        res[:, 2] * an[:, 5] + an[:, 2],
        an[:, 3] * np.exp(res[:, 3]),
        an[:, 4] * np.exp(res[:, 4]),
        an[:, 5] * np.exp(res[:, 5]),
        normalize_angle(an[:, 6] + dyaw),
    ], axis=1)


def encode_box(gt: Box3D, anchor: Box3D) -> np.ndarray:
    res, _ = encode_boxes(gt.as_array(), anchor.as_array())
    return res[0]


def decode_box(residual, anchor: Box3D, direction: int = 0) -> Box3D:
    arr = decode_boxes(residual, anchor.as_array(), [direction])[0]
    return Box3D.from_array(arr, class_id=anchor.class_id)


# ---------------------------------------------------------------------------
# suppression
# ---------------------------------------------------------------------------

def nms_rotated(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float,
                classes: Optional[np.ndarray] = None, max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy NMS by descending score; a box is dropped when its BEV IoU with a
    kept box of the same class reaches ``iou_thresh``. Returns kept indices."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = boxes.shape[0]
    classes = np.zeros(n, dtype=np.int64) if classes is None else np.asarray(classes)
    order = np.argsort(-scores, kind="stable")
    radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest] & (classes[rest] == classes[i])]
        if rest.size == 0:
            continue
        near = np.hypot(boxes[rest, 0] - boxes[i, 0], boxes[rest, 1] - boxes[i, 1]) < radius[rest] + radius[i]
        for j in rest[near]:
            if rotated_iou_bev(boxes[i], boxes[j]) >= iou_thresh:
                suppressed[j] = True
    return np.asarray(keep, dtype=np.int64)
