"""Sparse anchor head: anchors, target assignment, prediction at nonempty
cells only, and post-processing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import Box3D, decode_boxes, encode_boxes, iou_matrix, nms_rotated
from .errors import ConfigurationError
from .losses import LossConfig, focal_loss, loss_total, smooth_l1
from .nn import Conv2d, Linear, Module
from .pillars import VoxelGridConfig
from .tensor import Tensor


@dataclass(frozen=True)
class AnchorClass:
    name: str
    size: tuple  # (w, l, h)
    z_center: float
    match_iou_pos: float
    match_iou_neg: float

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ConfigurationError(f"{self.name}: anchor size must be three positive numbers")
        if not 0 < self.match_iou_neg < self.match_iou_pos <= 1:
            raise ConfigurationError(
                f"{self.name}: need 0 < match_iou_neg < match_iou_pos <= 1, got "
                f"{self.match_iou_neg} / {self.match_iou_pos}")


CAR = AnchorClass("Car", (1.6, 3.9, 1.56), -1.0, 0.6, 0.45)
PEDESTRIAN = AnchorClass("Pedestrian", (0.6, 0.8, 1.73), -0.6, 0.5, 0.35)
CYCLIST = AnchorClass("Cyclist", (0.6, 1.76, 1.73), -0.6, 0.5, 0.35)


@dataclass(frozen=True)
class AnchorConfig:
    classes: tuple = (CAR, PEDESTRIAN, CYCLIST)
    yaws: tuple = (0.0, math.pi / 2)

    def __post_init__(self):
        if not self.classes:
            raise ConfigurationError("at least one anchor class is required")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.classes) * len(self.yaws)

    def anchor_classes(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_classes), len(self.yaws))


def generate_anchors(cfg: AnchorConfig, grid: VoxelGridConfig, stride: int = 2) -> np.ndarray:
    """Anchors of shape (H', W', A, 7) centred on the cells of the stride-``stride`` grid."""
    if grid.H % stride or grid.W % stride:
        raise ConfigurationError(f"grid {grid.H}x{grid.W} not divisible by head stride {stride}")
    hh, ww = grid.H // stride, grid.W // stride
    vx, vy = grid.voxel_size[0] * stride, grid.voxel_size[1] * stride
    xs = grid.x_range[0] + (np.arange(ww) + 0.5) * vx
    ys = grid.y_range[0] + (np.arange(hh) + 0.5) * vy
    per_cell = []
    for cls in cfg.classes:
        w, l, h = cls.size
        for yaw in cfg.yaws:
            per_cell.append([w, l, h, yaw, cls.z_center])
    per_cell = np.array(per_cell)
    a = per_cell.shape[0]
    out = np.zeros((hh, ww, a, 7))
    out[..., 0] = xs[None, :, None]
    out[..., 1] = ys[:, None, None]
    out[..., 2] = per_cell[:, 4]
    out[..., 3:6] = per_cell[:, :3]
    out[..., 6] = per_cell[:, 3]
    return out


@dataclass
class Assignment:
    labels: np.ndarray      # 1 positive, 0 negative, -1 ignored
    gt_index: np.ndarray    # matched gt for positives, -1 otherwise
    max_iou: np.ndarray


def assign_targets(anchors: np.ndarray, anchor_classes: np.ndarray, gts: np.ndarray,
                   gt_classes: np.ndarray, cfg: AnchorConfig) -> Assignment:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    m = anchors.shape[0]
    anchor_classes = np.asarray(anchor_classes).reshape(-1)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    gt_classes = np.asarray(gt_classes).reshape(-1)
    labels = np.zeros(m, dtype=np.int64)
    gt_index = np.full(m, -1, dtype=np.int64)
    max_iou = np.zeros(m)
    if gts.shape[0] == 0 or m == 0:
        return Assignment(labels, gt_index, max_iou)
    iou = iou_matrix(anchors, gts)
    iou[anchor_classes[:, None] != gt_classes[None, :]] = 0.0
    best = iou.argmax(axis=1)
    max_iou = iou[np.arange(m), best]
    pos_thr = np.array([c.match_iou_pos for c in cfg.classes])[anchor_classes]
    neg_thr = np.array([c.match_iou_neg for c in cfg.classes])[anchor_classes]
    pos = max_iou >= pos_thr
    neg = max_iou < neg_thr
    labels[~pos & ~neg] = -1
    labels[pos] = 1
    gt_index[pos] = best[pos]
    for g in range(gts.shape[0]):
        col = iou[:, g]
        a = int(col.argmax())
        if col[a] > 0:
            labels[a] = 1
            gt_index[a] = g
    return Assignment(labels, gt_index, max_iou)


@dataclass
class SparseHeadOutput:
    valid_cells: np.ndarray
    cls_logits: Tensor
    reg: Tensor
    dir_logits: Tensor
    grid_shape: tuple = (0, 0)


class SparseHead(Module):
    """Shared 3x3 conv over the BEV map, rows gathered at valid cells, then
    per-branch 1x1 projections."""

    def __init__(self, cin: int, channels: int, anchors_per_cell: int, num_classes: int, rng,
                 dtype=np.float64, prior: float = 0.01):
        self.A, self.K = anchors_per_cell, num_classes
        self.shared = Conv2d(cin, channels, 3, rng, dtype=dtype)
        self.cls = Linear(channels, anchors_per_cell * num_classes, rng, dtype)
        self.reg = Linear(channels, anchors_per_cell * 7, rng, dtype)
        self.dir = Linear(channels, anchors_per_cell * 2, rng, dtype)
        self.cls.weight.data *= 0.1
        self.reg.weight.data *= 0.1
        self.cls.bias.data[:] = -math.log((1 - prior) / prior)

    def _features(self, bev: Tensor) -> Tensor:
        x = T.relu(self.shared(bev))
        c, h, w = x.shape
        return T.transpose(T.reshape(x, (c, h * w)))

    def _branches(self, rows: Tensor, valid_cells, grid_shape):
        v = rows.shape[0]
        return SparseHeadOutput(
            np.asarray(valid_cells, dtype=np.int64),
            T.reshape(self.cls(rows), (v, self.A, self.K)),
            T.reshape(self.reg(rows), (v, self.A, 7)),
            T.reshape(self.dir(rows), (v, self.A, 2)),
            grid_shape,
        )

    def __call__(self, bev: Tensor, occupancy: np.ndarray) -> SparseHeadOutput:
        if occupancy.shape != bev.shape[1:]:
            raise ConfigurationError(f"occupancy {occupancy.shape} does not match BEV map {bev.shape[1:]}")
        valid = np.flatnonzero(occupancy.reshape(-1))
        rows = T.gather_rows(self._features(bev), valid)
        return self._branches(rows, valid, bev.shape[1:])

    def dense(self, bev: Tensor) -> SparseHeadOutput:
        """Predictions for every cell (the reference the sparse path must match)."""
        feats = self._features(bev)
        return self._branches(feats, np.arange(feats.shape[0]), bev.shape[1:])


def sparse_head_forward(bev: Tensor, occupancy: np.ndarray, head: SparseHead) -> SparseHeadOutput:
    return head(bev, occupancy)


@dataclass
class Targets:
    cls: np.ndarray       # (V*A, K) one-hot
    cls_weight: np.ndarray  # (V*A,) 1 for pos/neg, 0 ignored
    pos_index: np.ndarray  # flat anchor indices of positives
    reg: np.ndarray       # (P, 7)
    dir: np.ndarray       # (P, 2) one-hot
    num_pos: int


def build_targets(anchors_valid: np.ndarray, anchor_classes: np.ndarray, gts: np.ndarray,
                  gt_classes: np.ndarray, cfg: AnchorConfig) -> Targets:
    """Training targets for the (V, A) anchors at valid cells."""
    v, a = anchors_valid.shape[:2]
    flat = anchors_valid.reshape(-1, 7)
    acls = np.tile(anchor_classes, v)
    asg = assign_targets(flat, acls, gts, gt_classes, cfg)
    k = cfg.num_classes
    cls = np.zeros((v * a, k))
    pos = np.flatnonzero(asg.labels == 1)
    cls[pos, np.asarray(gt_classes)[asg.gt_index[pos]]] = 1.0
    weight = (asg.labels >= 0).astype(np.float64)
    if pos.size:
        reg, direction = encode_boxes(np.asarray(gts)[asg.gt_index[pos]], flat[pos])
    else:
        reg, direction = np.zeros((0, 7)), np.zeros(0, dtype=np.int64)
    dir_t = np.zeros((pos.size, 2))
    dir_t[np.arange(pos.size), direction] = 1.0
    return Targets(cls, weight, pos, reg, dir_t, int(pos.size))


def head_loss(out: SparseHeadOutput, targets: Targets, cfg: LossConfig):
    v, a, k = out.cls_logits.shape
    cls_l = focal_loss(T.reshape(out.cls_logits, (v * a, k)), targets.cls, targets.cls_weight,
                       cfg.focal_alpha, cfg.focal_gamma, normalizer=targets.num_pos)
    reg_rows = T.gather_rows(T.reshape(out.reg, (v * a, 7)), targets.pos_index)
    reg_l = smooth_l1(reg_rows, targets.reg, normalizer=targets.num_pos)
    dir_rows = T.gather_rows(T.reshape(out.dir_logits, (v * a, 2)), targets.pos_index)
    dir_l = focal_loss(dir_rows, targets.dir, None, cfg.focal_alpha, cfg.focal_gamma,
                       normalizer=targets.num_pos)
    return loss_total(cls_l, reg_l, dir_l, cfg)


def decode_and_nms(out: SparseHeadOutput, anchors: np.ndarray, score_thresh: float = 0.3,
                   iou_thresh: float = 0.5, max_keep: int = 100, pre_nms: int = 1000) -> List[Box3D]:
    """Score, threshold, decode and suppress. ``anchors`` is (H', W', A, 7)."""
    if not (0 <= score_thresh <= 1 and 0 <= iou_thresh <= 1):
        raise ConfigurationError("thresholds must lie in [0, 1]")
    v = out.valid_cells.size
    if v == 0:
        return []
    a = anchors.shape[2]
    flat_anchors = anchors.reshape(-1, a, 7)[out.valid_cells].reshape(-1, 7)
    probs = T.sigmoid_np(out.cls_logits.data.astype(np.float64)).reshape(v * a, -1)
    cls_id = probs.argmax(axis=1)
    score = probs[np.arange(v * a), cls_id]
    cand = np.flatnonzero(score >= score_thresh)
    if cand.size == 0:
        return []
    if cand.size > pre_nms:
        cand = cand[np.argsort(-score[cand], kind="stable")[:pre_nms]]
    direction = out.dir_logits.data.reshape(v * a, 2)[cand].argmax(axis=1)
    boxes = decode_boxes(out.reg.data.reshape(v * a, 7)[cand].astype(np.float64), flat_anchors[cand], direction)
    ok = np.all(np.isfinite(boxes), axis=1) & np.all(boxes[:, 3:6] > 0, axis=1)
    cand, boxes = cand[ok], boxes[ok]
    keep = nms_rotated(boxes, score[cand], iou_thresh, classes=cls_id[cand], max_keep=max_keep)
    return [Box3D.from_array(boxes[i], class_id=int(cls_id[cand[i]]), score=float(score[cand[i]]))
            for i in keep]
