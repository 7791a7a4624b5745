"""Slice pillars: scatter point features into a height-sliced BEV volume,
collapse (D, C) into one channel axis, mix per cell, then run the 2D backbone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .nn import MLP, Conv2d, Module
from .tensor import Tensor


def _exact_cells(lo: float, hi: float, size: float, axis: str) -> int:
    if size <= 0 or hi <= lo:
        raise ConfigurationError(f"{axis}: need max > min and positive voxel size")
    ratio = (hi - lo) / size
    n = int(round(ratio))
    if n < 1 or not math.isclose(ratio, n, rel_tol=0, abs_tol=1e-6):
        raise ConfigurationError(f"{axis}: range {hi - lo} is not a multiple of voxel size {size}")
    return n


@dataclass(frozen=True)
class VoxelGridConfig:
    x_range: tuple = (0.0, 69.12)
    y_range: tuple = (-39.68, 39.68)
    z_range: tuple = (-3.0, 1.0)
    voxel_size: tuple = (0.16, 0.16, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        object.__setattr__(self, "z_range", tuple(float(v) for v in self.z_range))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        _ = self.H, self.W, self.D

    @property
    def W(self) -> int:
        return _exact_cells(*self.x_range, self.voxel_size[0], "x")

    @property
    def H(self) -> int:
        return _exact_cells(*self.y_range, self.voxel_size[1], "y")

    @property
    def D(self) -> int:
        return _exact_cells(*self.z_range, self.voxel_size[2], "z")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])


def compute_voxel_index(p, cfg: VoxelGridConfig) -> Optional[tuple]:
    """``(ix, iy, iz)`` of one point, or None when outside the half-open grid."""
    ix, iy, iz, ok = voxel_indices(np.asarray(p, dtype=np.float64)[None, :3], cfg)
    if not ok[0]:
        return None
    return int(ix[0]), int(iy[0]), int(iz[0])


def voxel_indices(xyz: np.ndarray, cfg: VoxelGridConfig):
    x, y, z = np.array(np.asarray(xyz, dtype=np.float64)[:, :3].T, order="C")
    vx, vy, vz = cfg.voxel_size
    ix = np.floor((x - cfg.x_range[0]) / vx).astype(np.int64)
    iy = np.floor((y - cfg.y_range[0]) / vy).astype(np.int64)
    iz = np.floor((z - cfg.z_range[0]) / vz).astype(np.int64)
    ok = (ix >= 0) & (ix < cfg.W) & (iy >= 0) & (iy < cfg.H) & (iz >= 0) & (iz < cfg.D)
    return ix, iy, iz, ok


@dataclass
class PillarVolume:
    """Collapsed (H*W, D*C) volume stored for nonempty columns only.

    ``columns`` are flat cell ids (``iy * W + ix``) in ascending order and
    ``column_features`` their D*C rows. ``winner_index`` maps each nonempty
    voxel id (``cell * D + iz``) to the point that supplied it.
    """

    H: int
    W: int
    D: int
    C: int
    columns: np.ndarray
    column_features: Tensor
    occupancy: np.ndarray
    voxel_ids: np.ndarray
    winner_index: np.ndarray

    @property
    def features(self) -> Tensor:
        """Dense (H*W, D*C) view; mostly for inspection and tests."""
        return T.scatter_rows(self.column_features, self.columns, self.H * self.W)

    def winners(self) -> dict:
        return dict(zip(self.voxel_ids.tolist(), self.winner_index.tolist()))


@dataclass
class PillarPlan:
    """Index bookkeeping for one cloud; reusable across forward passes.

    ``winner_index`` (point ids) and ``winner_rows`` (rows of the
    column-major ``(columns * D, C)`` voxel table) are aligned with the
    ascending ``voxel_ids``.
    """

    in_range: np.ndarray
    local_rows: np.ndarray
    columns: np.ndarray
    voxel_ids: np.ndarray
    winner_index: np.ndarray
    winner_rows: np.ndarray
    occupancy: np.ndarray


def plan_pillars(xyz: np.ndarray, cfg: VoxelGridConfig) -> PillarPlan:
    ix, iy, iz, ok = voxel_indices(xyz, cfg)
    in_range = np.nonzero(ok)[0]
    key = (iy[in_range] * cfg.W + ix[in_range]) * cfg.D + iz[in_range]
    # one stable sort: voxels ascending, points of a voxel in index order
    order = T.stable_argsort_int(key)
    ks = key[order]
    n = ks.size
    last = np.ones(n, dtype=bool)
    last[:-1] = ks[1:] != ks[:-1]
    cells = ks // cfg.D
    new_col = np.ones(n, dtype=bool)
    new_col[1:] = cells[1:] != cells[:-1]
    local_sorted = (np.cumsum(new_col) - 1) * cfg.D + (ks - cells * cfg.D)
    local_rows = np.empty(n, dtype=np.int64)
    local_rows[order] = local_sorted
    columns = cells[new_col]
    occ = np.zeros(cfg.H * cfg.W, dtype=bool)
    occ[columns] = True
    return PillarPlan(in_range, local_rows, columns, ks[last], in_range[order[last]], local_sorted[last],
                      occ.reshape(cfg.H, cfg.W))


def scatter_to_pillars(point_feats: Tensor, xyz: np.ndarray, cfg: VoxelGridConfig,
                       plan: Optional[PillarPlan] = None) -> PillarVolume:
    """Scatter (N, C) point features into slice pillars.

    Within one voxel the point with the largest index wins; only winners
    receive gradient. Out-of-range points are dropped.
    """
    xyz = np.asarray(xyz)
    if point_feats.shape[0] != xyz.shape[0]:
        raise ContractError(f"{point_feats.shape[0]} feature rows for {xyz.shape[0]} points")
    plan = plan_pillars(xyz, cfg) if plan is None else plan
    c = point_feats.shape[1]
    nc = plan.columns.size
    rows = T.gather_rows(point_feats, plan.winner_index)
    vox = T.scatter_rows(rows, plan.winner_rows, nc * cfg.D, unique=True)
    col_feats = T.reshape(vox, (nc, cfg.D * c))
    return PillarVolume(cfg.H, cfg.W, cfg.D, c, plan.columns, col_feats, plan.occupancy,
                        plan.voxel_ids, plan.winner_index)


class PillarChannelMLP(Module):
    """Per-cell fully-connected layers over the D*C axis (a stack of 1x1 convs)."""

    def __init__(self, in_features: int, widths: Sequence[int], rng, dtype=np.float64):
        self.mlp = MLP(in_features, widths, rng, dtype)
        self.out_channels = self.mlp.out_features

    def __call__(self, vol: PillarVolume) -> Tensor:
        cb = self.out_channels
        hw = vol.H * vol.W
        dtype = self.mlp.layers[0].weight.dtype
        empty = self.mlp(Tensor(np.zeros((1, vol.D * vol.C), dtype=dtype)))
        base = T.gather_rows(empty, np.zeros(hw, dtype=np.int64))
        if vol.columns.size:
            filled = T.scatter_rows(self.mlp(vol.column_features), vol.columns, hw)
            mask = np.zeros((hw, 1), dtype=bool)
            mask[vol.columns] = True
            base = T.where(mask, filled, base)
        return T.reshape(T.transpose(base), (cb, vol.H, vol.W))


def pillar_channel_mlp(vol: PillarVolume, mlp: PillarChannelMLP) -> Tensor:
    return mlp(vol)


class BEVBackbone(Module):
    """Three stride-2 conv blocks; each output resized to half resolution and concatenated."""

    def __init__(self, cin: int, channels: Sequence[int] = (64, 128, 256),
                 layers: Sequence[int] = (1, 1, 1), rng=None, dtype=np.float64):
        if len(channels) != 3 or len(layers) != 3:
            raise ConfigurationError("BEV backbone has exactly three blocks")
        rng = np.random.default_rng(0) if rng is None else rng
        self.blocks = []
        c = cin
        for ch, n in zip(channels, layers):
            convs = [Conv2d(c, ch, 3, rng, stride=2, dtype=dtype)]
            convs += [Conv2d(ch, ch, 3, rng, dtype=dtype) for _ in range(max(int(n) - 1, 0))]
            self.blocks.append(convs)
            c = ch
        self.out_channels = int(np.sum(channels))

    def __call__(self, x: Tensor) -> Tensor:
        _, h, w = x.shape
        if h % 8 or w % 8:
            raise ConfigurationError(f"BEV map {h}x{w} must be divisible by 8")
        outs = []
        for convs in self.blocks:
            for conv in convs:
                x = T.relu(conv(x))
            outs.append(T.bilinear_resize(x, h // 2, w // 2))
        return T.concat(outs, axis=0)


def bev_backbone(x: Tensor, backbone: BEVBackbone) -> Tensor:
    return backbone(x)
