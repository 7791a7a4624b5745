"""Training-time augmentation: flip, global rotation, global scaling, and
ground-truth object injection."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

from ..boxes import Box3D, boxes_to_array, iou_matrix, points_in_box, points_in_footprint
from ..errors import ConfigurationError
from ..geometry import PointCloud
from .kitti import SceneSample


@dataclass(frozen=True)
class AugmentationConfig:
    flip_x_prob: float = 0.5
    scale_range: tuple = (0.95, 1.05)
    rotation_range: tuple = (-math.pi / 4, math.pi / 4)
    gt_sample_max_per_class: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "rotation_range", tuple(float(v) for v in self.rotation_range))
        if not 0 <= self.flip_x_prob <= 1:
            raise ConfigurationError("flip_x_prob must lie in [0, 1]")
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ConfigurationError(f"bad scale_range {self.scale_range}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ConfigurationError(f"bad rotation_range {self.rotation_range}")
        if self.gt_sample_max_per_class < 0:
            raise ConfigurationError("gt_sample_max_per_class must be >= 0")


IDENTITY_AUGMENTATION = AugmentationConfig(0.0, (1.0, 1.0), (0.0, 0.0), 0)


def flip_y(sample: SceneSample) -> SceneSample:
    """Mirror across the x axis (y -> -y, yaw -> -yaw)."""
    pts = sample.cloud.points.copy()
    pts[:, 1] = -pts[:, 1]
    gts = [replace(b, y=-b.y, yaw=-b.yaw) for b in sample.gts]
    return SceneSample(PointCloud(pts), gts, sample.scene_id)


def rotate_z(sample: SceneSample, angle: float) -> SceneSample:
    c, s = math.cos(angle), math.sin(angle)
    pts = sample.cloud.points.copy()
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    gts = [replace(b, x=c * b.x - s * b.y, y=s * b.x + c * b.y, yaw=b.yaw + angle) for b in sample.gts]
    return SceneSample(PointCloud(pts), gts, sample.scene_id)


def scale_scene(sample: SceneSample, factor: float) -> SceneSample:
    pts = sample.cloud.points.copy()
    pts[:, :3] *= factor
    gts = [replace(b, x=b.x * factor, y=b.y * factor, z=b.z * factor,
                   w=b.w * factor, l=b.l * factor, h=b.h * factor) for b in sample.gts]
    return SceneSample(PointCloud(pts), gts, sample.scene_id)


def augment(sample: SceneSample, cfg: AugmentationConfig, rng: np.random.Generator) -> SceneSample:
    """Random flip, then rotation about z, then global scale."""
    out = sample
    if cfg.flip_x_prob > 0 and rng.random() < cfg.flip_x_prob:
        out = flip_y(out)
    lo, hi = cfg.rotation_range
    if hi > lo or lo != 0:
        out = rotate_z(out, rng.uniform(lo, hi) if hi > lo else lo)
    lo, hi = cfg.scale_range
    if hi > lo or lo != 1:
        out = scale_scene(out, rng.uniform(lo, hi) if hi > lo else lo)
    return out


def build_gt_bank(samples: Sequence[SceneSample]) -> List[Tuple[Box3D, np.ndarray]]:
    bank = []
    for s in samples:
        for b in s.gts:
            mask = points_in_box(s.cloud.points, b)
            bank.append((b, s.cloud.points[mask].copy()))
    return bank


def gt_sample_injection(sample: SceneSample, bank, cfg: AugmentationConfig,
                        rng: np.random.Generator) -> SceneSample:
    """Paste bank objects that do not overlap (zero BEV IoU) any box already present."""
    if not bank or cfg.gt_sample_max_per_class == 0:
        return sample
    boxes = list(sample.gts)
    kept_pts = sample.cloud.points
    extra = []
    classes = sorted({b.class_id for b, _ in bank})
    for cid in classes:
        entries = [i for i, (b, _) in enumerate(bank) if b.class_id == cid]
        added = 0
        for i in rng.permutation(entries):
            if added >= cfg.gt_sample_max_per_class:
                break
            box, pts = bank[int(i)]
            if boxes and iou_matrix(box.as_array()[None], boxes_to_array(boxes)).max() > 0:
                continue
            kept_pts = kept_pts[~points_in_footprint(kept_pts, box)]
            boxes.append(replace(box))
            extra.append(pts)
            added += 1
    pts = np.concatenate([kept_pts, *extra], axis=0) if extra else kept_pts
    return SceneSample(PointCloud(pts), boxes, sample.scene_id)
