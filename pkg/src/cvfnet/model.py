"""The assembled detector: range/point fusion -> slice pillars -> BEV backbone -> sparse head."""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .fusion import (FusionStageSpec, PointRangeModule, PointStreamConfig, RangeStreamConfig,
                     default_fusion_stages, point_input_features)
from .geometry import IndexTable, PointCloud, RangeImage, SphericalConfig, build_range_image
from .head import AnchorConfig, SparseHead, SparseHeadOutput, generate_anchors
from .nn import Module
from .pillars import (BEVBackbone, PillarChannelMLP, PillarPlan, VoxelGridConfig, plan_pillars,
                      scatter_to_pillars)
from .tensor import Tensor


@dataclass
class ModelConfig:
    spherical: SphericalConfig = field(default_factory=SphericalConfig)
    range_stream: RangeStreamConfig = field(default_factory=RangeStreamConfig)
    point_stream: PointStreamConfig = field(default_factory=PointStreamConfig)
    fusion: list = None
    voxel: VoxelGridConfig = field(default_factory=VoxelGridConfig)
    pillar_widths: tuple = (64,)
    bev_channels: tuple = (64, 128, 256)
    bev_layers: tuple = (1, 1, 1)
    head_channels: int = 64
    head_stride: int = 2
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if self.fusion is None:
            self.fusion = default_fusion_stages(self.range_stream)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class Prepared:
    """Per-cloud inputs that do not depend on the weights."""

    cloud: PointCloud
    image: RangeImage
    table: IndexTable
    point_in: Tensor
    plan: PillarPlan
    head_occupancy: np.ndarray


class StageTimer:
    def __init__(self):
        self.times = {}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.times[name] = self.times.get(name, 0.0) + time.perf_counter() - t0


@contextmanager
def _maybe(timer, name):
    if timer is None:
        yield
    else:
        with timer.stage(name):
            yield


class CVFNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        self.point_range = PointRangeModule(cfg.range_stream, cfg.point_stream, cfg.fusion, rng, dt)
        c = self.point_range.out_channels
        self.pillar_mlp = PillarChannelMLP(cfg.voxel.D * c, cfg.pillar_widths, rng, dt)
        self.backbone = BEVBackbone(self.pillar_mlp.out_channels, cfg.bev_channels, cfg.bev_layers, rng, dt)
        self.head = SparseHead(self.backbone.out_channels, cfg.head_channels,
                               cfg.anchors.anchors_per_cell, cfg.anchors.num_classes, rng, dt)
        self.anchors = generate_anchors(cfg.anchors, cfg.voxel, cfg.head_stride)
        self.anchor_classes = cfg.anchors.anchor_classes()

    @property
    def bev_output_shape(self) -> tuple:
        return self.cfg.voxel.H // 2, self.cfg.voxel.W // 2

    def prepare(self, cloud: PointCloud, timer: Optional[StageTimer] = None) -> Prepared:
        dt = self.cfg.np_dtype
        with _maybe(timer, "projection"):
            image, table = build_range_image(cloud, self.cfg.spherical, dtype=dt)
        with _maybe(timer, "scatter"):
            plan = plan_pillars(cloud.xyz, self.cfg.voxel)
        occ = T.max_pool_mask(plan.occupancy, self.cfg.head_stride)
        return Prepared(cloud, image, table, point_input_features(cloud, dt), plan, occ)

    def forward(self, prep: Prepared, timer: Optional[StageTimer] = None, keep: Optional[dict] = None
                ) -> SparseHeadOutput:
        with _maybe(timer, "fusion"):
            feats = self.point_range(prep.point_in, prep.image.channels, prep.table)
        with _maybe(timer, "scatter"):
            vol = scatter_to_pillars(feats, prep.cloud.xyz, self.cfg.voxel, prep.plan)
        with _maybe(timer, "backbone"):
            bev = self.pillar_mlp(vol)
            bev_out = self.backbone(bev)
        with _maybe(timer, "head"):
            out = self.head(bev_out, prep.head_occupancy)
        if keep is not None:
            keep.update(point_features=feats, volume=vol, bev=bev, bev_out=bev_out)
        return out

    __call__ = forward

    def anchors_at(self, valid_cells: np.ndarray) -> np.ndarray:
        a = self.anchors.shape[2]
        return self.anchors.reshape(-1, a, 7)[valid_cells]
