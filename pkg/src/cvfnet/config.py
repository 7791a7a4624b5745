"""Experiment configuration: one YAML file holding every module's settings.

Angles are written in degrees in the file (keys ending in ``_deg``) and
converted to radians here. Unknown keys are rejected. See
``configs/kitti.yaml`` for the full schema with defaults.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .boxes import CLASS_NAMES
from .data.augment import AugmentationConfig
from .data.synth import SyntheticSceneSpec
from .errors import ConfigurationError
from .evaluation import EvalConfig
from .fusion import FusionStageSpec, PointStreamConfig, RangeStreamConfig, default_fusion_stages, parse_tap
from .geometry import SphericalConfig
from .head import AnchorClass, AnchorConfig
from .losses import LossConfig
from .model import ModelConfig
from .pillars import VoxelGridConfig


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 1
    lr_peak: float = 0.01
    lr_floor: float = 1e-7
    warmup_fraction: float = 0.4
    weight_decay: float = 0.0
    augment: bool = True
    score_thresh: float = 0.3
    nms_iou: float = 0.5
    max_keep: int = 100

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.lr_floor <= self.lr_peak:
            raise ConfigurationError("need 0 < lr_floor <= lr_peak")
        if not 0 <= self.warmup_fraction <= 1:
            raise ConfigurationError("warmup_fraction must lie in [0, 1]")


@dataclass
class BenchConfig:
    n_points: int = 120000
    n_objects: int = 3
    warmup: int = 3
    iterations: int = 20

    def __post_init__(self):
        if self.warmup < 0 or self.iterations < 1:
            raise ConfigurationError("bench needs iterations >= 1 and warmup >= 0")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    n_scenes: int = 0
    paths: dict = field(default_factory=dict)
    calib: Optional[list] = None

    def class_ids(self) -> list:
        """Global class id (index into CLASS_NAMES) of each model class."""
        return [CLASS_NAMES.index(c.name) for c in self.model.anchors.classes]

    def validate(self):
        validate(self)
        return self


def _take(d: dict, cls, section: str, convert=None):
    d = dict(d or {})
    if convert:
        d = convert(d)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigurationError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigurationError(f"[{section}] {exc}") from exc


def _deg(d: dict, *keys) -> dict:
    out = dict(d)
    for key in keys:
        dk = key + "_deg"
        if dk in out:
            if key in out:
                raise ConfigurationError(f"give either {key} or {dk}, not both")
            val = out.pop(dk)
            out[key] = [math.radians(v) for v in val] if isinstance(val, (list, tuple)) else math.radians(val)
    return out


def _model(d: dict) -> ModelConfig:
    d = dict(d or {})
    known = {f.name for f in fields(ModelConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigurationError(f"[model] unknown key(s): {', '.join(unknown)}")
    sph = _take(d.pop("spherical", {}), SphericalConfig, "model.spherical", lambda x: _deg(x, "fov_up", "fov_down"))
    rs = _take(d.pop("range_stream", {}), RangeStreamConfig, "model.range_stream")
    ps = _take(d.pop("point_stream", {}), PointStreamConfig, "model.point_stream")
    fusion = d.pop("fusion", None)
    stages = ([_take(s, FusionStageSpec, "model.fusion") for s in fusion] if fusion is not None
              else default_fusion_stages(rs))
    vox = _take(d.pop("voxel", {}), VoxelGridConfig, "model.voxel")
    anchors = d.pop("anchors", None)
    if anchors is None:
        acfg = AnchorConfig()
    else:
        anchors = _deg(anchors, "yaws")
        extra = sorted(set(anchors) - {"classes", "yaws"})
        if extra:
            raise ConfigurationError(f"[model.anchors] unknown key(s): {', '.join(extra)}")
        classes = tuple(_take(c, AnchorClass, "model.anchors.classes") for c in anchors.get("classes", []))
        kw = {"classes": classes} if classes else {}
        if "yaws" in anchors:
            kw["yaws"] = tuple(anchors["yaws"])
        acfg = AnchorConfig(**kw)
    for key in ("pillar_widths", "bev_channels", "bev_layers"):
        if key in d:
            d[key] = tuple(int(v) for v in d[key])
    return ModelConfig(spherical=sph, range_stream=rs, point_stream=ps, fusion=stages, voxel=vox,
                       anchors=acfg, **d)


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
    try:
        cfg = ExperimentConfig(
            model=_model(raw.get("model")),
            loss=_take(raw.get("loss"), LossConfig, "loss"),
            augmentation=_take(raw.get("augmentation"), AugmentationConfig, "augmentation",
                               lambda x: _deg(x, "rotation_range")),
            eval=_take(raw.get("eval"), EvalConfig, "eval"),
            train=_take(raw.get("train"), TrainConfig, "train"),
            synth=_take(raw.get("synth"), SyntheticSceneSpec, "synth",
                        lambda x: _deg(x, "yaw_range", "azimuth_span", "fov_up", "fov_down")),
            bench=_take(raw.get("bench"), BenchConfig, "bench"),
            seed=int(raw.get("seed", 0)),
            n_scenes=int(raw.get("n_scenes", 0)),
            paths=dict(raw.get("paths") or {}),
            calib=raw.get("calib"),
        )
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    return validate(cfg)


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: YAML syntax error: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return from_dict(raw or {})


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Cross-module consistency checks; raises ConfigurationError."""
    m = cfg.model
    rs, sph, vox = m.range_stream, m.spherical, m.voxel
    ts = rs.total_stride
    if sph.h % ts or sph.w % ts:
        raise ConfigurationError(
            f"range image {sph.h}x{sph.w} must be divisible by the range-stream stride {ts}")
    if vox.H % 8 or vox.W % 8:
        raise ConfigurationError(f"BEV grid {vox.H}x{vox.W} must be divisible by 8 for the backbone")
    if m.head_stride != 2:
        raise ConfigurationError("the head runs at the backbone's 1/2 output stride; head_stride must be 2")
    limits = {"encoder": len(rs.encoder_strides), "decoder": rs.decoder_blocks}
    taps = []
    for st in m.fusion:
        kind, idx = parse_tap(st.range_tap)
        if not 0 <= idx < limits[kind]:
            raise ConfigurationError(f"fusion tap {st.range_tap!r} out of range (0..{limits[kind] - 1})")
        taps.append(st.range_tap)
    if sorted(s.stage for s in m.fusion) != ["early", "late", "middle"]:
        raise ConfigurationError("fusion needs exactly one early, middle and late stage")
    if len(set(taps)) != 3:
        raise ConfigurationError(f"fusion taps must be distinct: {taps}")
    for c in m.anchors.classes:
        if c.name not in CLASS_NAMES:
            raise ConfigurationError(f"anchor class {c.name!r} is not one of {CLASS_NAMES}")
    if len({c.name for c in m.anchors.classes}) != len(m.anchors.classes):
        raise ConfigurationError("duplicate anchor class")
    if len(cfg.eval.iou_thresholds) != len(CLASS_NAMES):
        raise ConfigurationError(f"eval.iou_thresholds needs one value per class {CLASS_NAMES}")
    if m.dtype not in ("float32", "float64"):
        raise ConfigurationError(f"model.dtype must be float32 or float64, got {m.dtype!r}")
    s = cfg.synth
    if s.x_range[0] < vox.x_range[0] or s.x_range[1] > vox.x_range[1] or \
            s.y_range[0] < vox.y_range[0] or s.y_range[1] > vox.y_range[1]:
        raise ConfigurationError("synthetic object placement range must lie inside the voxel grid")
    unknown = set(s.class_mix) - {c.name for c in m.anchors.classes}
    if unknown:
        raise ConfigurationError(f"synth.class_mix has classes without anchors: {sorted(unknown)}")
    if cfg.calib is not None:
        import numpy as np

        arr = np.asarray(cfg.calib, dtype=float)
        if arr.shape != (4, 4):
            raise ConfigurationError("calib must be a 4x4 camera->LiDAR matrix")
    if cfg.n_scenes < 0:
        raise ConfigurationError("n_scenes must be >= 0")
    return cfg
