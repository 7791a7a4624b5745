"""KITTI-style point cloud binaries and label text files."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ..boxes import CLASS_NAMES, Box3D, normalize_angle
from ..errors import DomainError, ParseError
from ..geometry import PointCloud


@dataclass
class SceneSample:
    cloud: PointCloud
    gts: List[Box3D] = field(default_factory=list)
    scene_id: str = ""

    def gt_array(self) -> np.ndarray:
        if not self.gts:
            return np.zeros((0, 7))
        return np.stack([b.as_array() for b in self.gts])

    def gt_classes(self) -> np.ndarray:
        return np.array([b.class_id for b in self.gts], dtype=np.int64)


def read_bin(path) -> PointCloud:
    return PointCloud.from_bin(path)


def write_bin(path, cloud: PointCloud):
    cloud.to_bin(path)


def _lidar_from_camera(loc, h, ry, calib):
    """Camera-frame bottom centre + rotation_y -> LiDAR-frame centre + yaw."""
    p = calib @ np.array([loc[0], loc[1], loc[2], 1.0])
    return p[0], p[1], p[2] + h / 2.0, -ry - math.pi / 2


def _camera_from_lidar(box: Box3D, calib):
    inv = np.linalg.inv(calib)
    p = inv @ np.array([box.x, box.y, box.z - box.h / 2.0, 1.0])
    return p[0], p[1], p[2], float(normalize_angle(-box.yaw - math.pi / 2))


def parse_label_line(line: str, calib=None, class_names=CLASS_NAMES, lineno=None, path=None) -> Optional[Box3D]:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise ParseError(f"expected 15 or 16 fields, got {len(parts)}", line=lineno, path=path)
    name = parts[0]
    try:
        vals = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise ParseError(str(exc), line=lineno, path=path) from exc
    if name not in class_names:
        return None
    trunc, occ, _alpha, x1, y1, x2, y2, h, w, l, x, y, z, ry = vals[:14]
    score = vals[14] if len(vals) == 15 else None
    if calib is not None:
        cx, cy, cz, yaw = _lidar_from_camera((x, y, z), h, ry, np.asarray(calib))
    else:
        cx, cy, cz, yaw = x, y, z + h / 2.0, ry
    try:
        return Box3D(cx, cy, cz, w, l, h, yaw, class_id=class_names.index(name), score=score,
                     truncated=trunc, occluded=int(occ), bbox2d=(x1, y1, x2, y2))
    except DomainError as exc:
        raise ParseError(str(exc), line=lineno, path=path) from exc


def read_labels(path, calib=None, class_names=CLASS_NAMES) -> List[Box3D]:
    """Parse a KITTI label file.

    Without ``calib`` the file is taken to be in the LiDAR frame already:
    ``x y z`` is the bottom-centre of the box and ``rotation_y`` its yaw.
    With ``calib`` (4x4 camera->LiDAR transform) the standard camera-frame
    convention is converted.
    """
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        box = parse_label_line(line, calib, class_names, lineno, path)
        if box is not None:
            boxes.append(box)
    return boxes


def format_label_line(box: Box3D, calib=None, class_names=CLASS_NAMES) -> str:
    if calib is not None:
        x, y, z, ry = _camera_from_lidar(box, np.asarray(calib))
    else:
        x, y, z, ry = box.x, box.y, box.z - box.h / 2.0, box.yaw
    x1, y1, x2, y2 = box.bbox2d
    fields = [class_names[box.class_id], f"{box.truncated:.2f}", str(int(box.occluded)), "-10",
              *(f"{v:.2f}" for v in (x1, y1, x2, y2)),
              *(f"{v:.8f}" for v in (box.h, box.w, box.l, x, y, z, ry))]
    if box.score is not None:
        fields.append(f"{box.score:.8f}")
    return " ".join(fields)


def write_labels(path, boxes: Sequence[Box3D], calib=None, class_names=CLASS_NAMES):
    text = "".join(format_label_line(b, calib, class_names) + "\n" for b in boxes)
    Path(path).write_text(text)


def load_scene(bin_path, label_path=None, calib=None) -> SceneSample:
    cloud = read_bin(bin_path)
    gts = read_labels(label_path, calib) if label_path is not None and Path(label_path).exists() else []
    return SceneSample(cloud, gts, Path(bin_path).stem)


def write_scene(root, sample: SceneSample):
    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    (root / "label").mkdir(parents=True, exist_ok=True)
    write_bin(root / "velodyne" / f"{sample.scene_id}.bin", sample.cloud)
    write_labels(root / "label" / f"{sample.scene_id}.txt", sample.gts)


def read_manifest(path) -> list:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError("expected '<scene_id> <seed>'", line=lineno, path=path)
        try:
            out.append((parts[0], int(parts[1])))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno, path=path) from exc
    return out


def write_manifest(path, entries):
    Path(path).write_text("".join(f"{sid} {seed}\n" for sid, seed in entries))


def load_dataset(root, calib=None) -> List[SceneSample]:
    """Scenes of a ``velodyne/`` + ``label/`` directory, manifest order when present."""
    root = Path(root)
    manifest = root / "manifest.txt"
    if manifest.exists():
        ids = [sid for sid, _ in read_manifest(manifest)]
    else:
        ids = sorted(p.stem for p in (root / "velodyne").glob("*.bin"))
    return [load_scene(root / "velodyne" / f"{sid}.bin", root / "label" / f"{sid}.txt", calib) for sid in ids]
