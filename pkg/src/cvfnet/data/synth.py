"""Synthetic scenes: a ray-cast rotating LiDAR over a ground plane with box-shaped objects."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from ..boxes import CLASS_NAMES, Box3D, iou_matrix
from ..errors import ConfigurationError
from ..geometry import PointCloud
from .kitti import SceneSample

CLASS_SIZES = {"Car": (1.6, 3.9, 1.56), "Pedestrian": (0.6, 0.8, 1.73), "Cyclist": (0.6, 1.76, 1.73)}


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    n_background_points: int = 4000
    object_count: tuple = (2, 5)
    class_mix: Dict[str, float] = field(default_factory=lambda: {"Car": 1.0})
    size_jitter: float = 0.05
    yaw_range: tuple = (-math.pi, math.pi)
    x_range: tuple = (5.0, 35.0)
    y_range: tuple = (-15.0, 15.0)
    sensor_height: float = 1.73
    beams: int = 32
    azimuth_steps: int = 1024
    azimuth_span: tuple = (-math.pi, math.pi)
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(-25.0)
    max_range: float = 80.0
    min_points_per_object: int = 30
    clearance: float = 0.5
    max_attempts: int = 60

    def __post_init__(self):
        self.object_count = tuple(int(v) for v in self.object_count)
        for name in ("yaw_range", "x_range", "y_range", "azimuth_span"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.object_count[0] < 0 or self.object_count[0] > self.object_count[1]:
            raise ConfigurationError(f"bad object_count {self.object_count}")
        unknown = set(self.class_mix) - set(CLASS_SIZES)
        if unknown:
            raise ConfigurationError(f"unknown classes in class_mix: {sorted(unknown)}")
        if self.beams < 1 or self.azimuth_steps < 1:
            raise ConfigurationError("beams and azimuth_steps must be positive")
        if not self.fov_up > self.fov_down:
            raise ConfigurationError("fov_up must exceed fov_down")


def lidar_rays(spec: SyntheticSceneSpec) -> np.ndarray:
    """(R, 3) unit directions, beams top to bottom, azimuth sweeping the configured span."""
    if spec.beams == 1:
        elev = np.array([0.5 * (spec.fov_up + spec.fov_down)])
    else:
        # beam centres, so each beam falls in its own range-image row
        step = (spec.fov_up - spec.fov_down) / spec.beams
        elev = spec.fov_up - step * (np.arange(spec.beams) + 0.5)
    a0, a1 = spec.azimuth_span
    az = a0 + (a1 - a0) * (np.arange(spec.azimuth_steps) + 0.5) / spec.azimuth_steps
    e, a = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def ray_box_hits(dirs: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Distance along each ray (from the origin) to an oriented box, inf on a miss."""
    x, y, z, w, l, h, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    o = np.array([-x, -y, -z])
    o_local = np.array([c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]])
    d_local = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1)
    half = np.array([l / 2, w / 2, h / 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_local
        t1 = (-half - o_local) * inv
        t2 = (half - o_local) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit, t, np.inf)


def cast(dirs: np.ndarray, boxes: np.ndarray, spec: SyntheticSceneSpec):
    """Nearest hit per ray. Returns (t, owner) with owner -1 for ground, -2 for no return."""
    t_ground = np.where(dirs[:, 2] < 0, -spec.sensor_height / np.where(dirs[:, 2] < 0, dirs[:, 2], -1.0), np.inf)
    best_t = t_ground
    owner = np.where(np.isfinite(t_ground), -1, -2)
    for k, box in enumerate(boxes):
        t = ray_box_hits(dirs, box)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        owner = np.where(closer, k, owner)
    far = best_t > spec.max_range
    owner = np.where(far, -2, owner)
    return best_t, owner


def _propose(spec: SyntheticSceneSpec, rng: np.random.Generator, names, probs) -> tuple:
    name = names[rng.choice(len(names), p=probs)]
    w, l, h = (s * (1.0 + spec.size_jitter * rng.uniform(-1, 1)) for s in CLASS_SIZES[name])
    x = rng.uniform(*spec.x_range)
    y = rng.uniform(*spec.y_range)
    yaw = rng.uniform(*spec.yaw_range)
    return name, np.array([x, y, -spec.sensor_height + h / 2, w, l, h, yaw])


def synth_generate(spec: SyntheticSceneSpec, scene_id: Optional[str] = None) -> SceneSample:
    rng = np.random.default_rng(spec.seed)
    dirs = lidar_rays(spec)
    names = sorted(spec.class_mix)
    weights = np.array([spec.class_mix[n] for n in names], dtype=np.float64)
    probs = weights / weights.sum()
    target = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))

    boxes, labels = [], []
    attempts = 0
    while len(boxes) < target and attempts < spec.max_attempts * max(target, 1):
        attempts += 1
        name, cand = _propose(spec, rng, names, probs)
        if boxes:
            padded = cand.copy()
            padded[3:5] += 2 * spec.clearance
            if iou_matrix(padded[None], np.array(boxes)).max() > 0:
                continue
        trial = np.array(boxes + [cand])
        _, owner = cast(dirs, trial, spec)
        counts = np.bincount(owner[owner >= 0], minlength=len(trial))
        if counts.min() < spec.min_points_per_object:
            continue
        boxes.append(cand)
        labels.append(name)

    t, owner = cast(dirs, np.array(boxes).reshape(-1, 7), spec)
    ground = np.flatnonzero(owner == -1)
    if spec.n_background_points >= 0 and ground.size > spec.n_background_points:
        ground = np.sort(rng.choice(ground, size=spec.n_background_points, replace=False))
    objs = np.flatnonzero(owner >= 0)
    keep = np.concatenate([ground, objs])
    xyz = dirs[keep] * t[keep, None]
    # object hits lie on box faces; snap ground returns exactly onto the plane
    xyz[: ground.size, 2] = -spec.sensor_height
    obj_intensity = rng.uniform(0.5, 0.9, size=max(len(boxes), 1))
    intensity = np.concatenate([
        rng.uniform(0.05, 0.3, size=ground.size),
        obj_intensity[owner[objs]] + rng.uniform(-0.05, 0.05, size=objs.size),
    ])
    pts = np.concatenate([xyz, np.clip(intensity, 0.0, 1.0)[:, None]], axis=1)
    gts = [Box3D(*b, class_id=CLASS_NAMES.index(n)) for b, n in zip(boxes, labels)]
    return SceneSample(PointCloud(pts), gts, scene_id or f"{spec.seed:06d}")


def scene_seed(global_seed: int, ordinal: int) -> int:
    return int(global_seed) ^ int(ordinal)
