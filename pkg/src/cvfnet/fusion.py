"""Point-Range fusion: a dense-block range encoder/decoder, a per-point MLP
stream, and three fusion blocks that swap features between the two views.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .geometry import (IndexTable, PointCloud, RangeImage, owner_targets,
                       point_features_from_range)
from .nn import MLP, Conv2d, Module
from .tensor import Tensor


@dataclass
class RangeStreamConfig:
    encoder_strides: tuple = (1, 1, 2, 2, 2, 2)
    encoder_layers_per_block: tuple = (3, 3, 5, 5, 5, 5)
    decoder_blocks: int = 4
    decoder_layers_per_block: int = 2
    growth: int = 8
    base_channels: int = 16

    def __post_init__(self):
        self.encoder_strides = tuple(int(s) for s in self.encoder_strides)
        self.encoder_layers_per_block = tuple(int(n) for n in self.encoder_layers_per_block)
        if len(self.encoder_strides) != len(self.encoder_layers_per_block):
            raise ConfigurationError("encoder_strides and encoder_layers_per_block differ in length")
        if any(s not in (1, 2) for s in self.encoder_strides):
            raise ConfigurationError(f"encoder strides must be 1 or 2, got {self.encoder_strides}")
        if any(n < 1 for n in self.encoder_layers_per_block) or self.decoder_layers_per_block < 1:
            raise ConfigurationError("every dense block needs at least one layer")
        if self.decoder_blocks != self.n_down:
            raise ConfigurationError(
                f"decoder_blocks ({self.decoder_blocks}) must equal the number of stride-2 encoder "
                f"blocks ({self.n_down}) to recover full resolution")
        if self.growth < 1 or self.base_channels < 1:
            raise ConfigurationError("growth and base_channels must be positive")

    @property
    def n_down(self) -> int:
        return sum(1 for s in self.encoder_strides if s == 2)

    @property
    def total_stride(self) -> int:
        return 2 ** self.n_down

    def encoder_channels(self, cin: int) -> list:
        out, c = [], cin
        for n in self.encoder_layers_per_block:
            c += n * self.growth
            out.append(c)
        return out


@dataclass
class PointStreamConfig:
    mlp_widths: tuple = (32, 64)

    def __post_init__(self):
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if not self.mlp_widths or any(w < 1 for w in self.mlp_widths):
            raise ConfigurationError(f"point MLP widths must be non-empty and positive: {self.mlp_widths}")


@dataclass
class FusionStageSpec:
    stage: str
    range_tap: str
    fusion_mlp_widths: tuple = (64,)

    def __post_init__(self):
        self.fusion_mlp_widths = tuple(int(w) for w in self.fusion_mlp_widths)
        if self.stage not in ("early", "middle", "late"):
            raise ConfigurationError(f"unknown fusion stage {self.stage!r}")
        if not self.fusion_mlp_widths:
            raise ConfigurationError(f"{self.stage}: fusion MLP needs at least one layer")
        parse_tap(self.range_tap)


def parse_tap(tap: str) -> tuple:
    try:
        kind, idx = tap.split(":")
        idx = int(idx)
    except ValueError:
        raise ConfigurationError(f"bad range tap {tap!r}, expected 'encoder:i' or 'decoder:i'") from None
    if kind not in ("encoder", "decoder"):
        raise ConfigurationError(f"bad range tap {tap!r}")
    return kind, idx


def default_fusion_stages(rs: RangeStreamConfig, widths=((32,), (64,), (64,))) -> list:
    """Early at encoder block 2, middle at the 4x decoder level, late at full resolution."""
    middle = max(rs.decoder_blocks - 1 - 2, 0) if rs.decoder_blocks >= 3 else 0
    return [
        FusionStageSpec("early", f"encoder:{min(1, len(rs.encoder_strides) - 1)}", widths[0]),
        FusionStageSpec("middle", f"decoder:{middle}", widths[1]),
        FusionStageSpec("late", f"decoder:{rs.decoder_blocks - 1}", widths[2]),
    ]


class DenseBlock(Module):
    """Optional stride-2 3x3 conv, then ``layers`` densely connected 3x3 conv + ReLU layers."""

    def __init__(self, cin: int, layers: int, growth: int, stride: int, rng, dtype=np.float64):
        if layers < 1:
            raise ConfigurationError("dense block needs at least one layer")
        self.stride = stride
        self.down = Conv2d(cin, cin, 3, rng, stride=2, dtype=dtype) if stride == 2 else None
        self.layers = [Conv2d(cin + i * growth, growth, 3, rng, dtype=dtype) for i in range(layers)]
        self.out_channels = cin + layers * growth

    def __call__(self, x: Tensor) -> Tensor:
        if self.down is not None:
            _, h, w = x.shape
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise ConfigurationError(f"cannot halve a {h}x{w} feature map")
            x = T.relu(self.down(x))
        feats = [x]
        for conv in self.layers:
            feats.append(T.relu(conv(T.concat(feats, axis=0))))
        return T.concat(feats, axis=0)


def denseblock_forward(x: Tensor, layers: int, growth: int, stride: int, rng=None) -> Tensor:
    """One-shot dense block with fresh weights (mostly for shape probing)."""
    rng = np.random.default_rng(0) if rng is None else rng
    return DenseBlock(x.shape[0], layers, growth, stride, rng, dtype=x.dtype)(x)


class RangeStream(Module):
    """Stem conv, dense-block encoder, U-Net style dense-block decoder.

    ``tap_channels`` maps a tap name (``"encoder:i"`` / ``"decoder:i"``) to the
    channel count a fusion callback at that tap will emit.
    """

    def __init__(self, cfg: RangeStreamConfig, rng, cin: int = 5,
                 tap_channels: Optional[Dict[str, int]] = None, dtype=np.float64):
        self.cfg = cfg
        tap_channels = dict(tap_channels or {})
        for tap in tap_channels:
            kind, idx = parse_tap(tap)
            limit = len(cfg.encoder_strides) if kind == "encoder" else cfg.decoder_blocks
            if not 0 <= idx < limit:
                raise ConfigurationError(f"tap {tap!r} out of range (0..{limit - 1})")
        self.stem = Conv2d(cin, cfg.base_channels, 3, rng, dtype=dtype)
        c = cfg.base_channels
        self.encoder, enc_out = [], []
        for i, (s, n) in enumerate(zip(cfg.encoder_strides, cfg.encoder_layers_per_block)):
            block = DenseBlock(c, n, cfg.growth, s, rng, dtype)
            self.encoder.append(block)
            c = tap_channels.get(f"encoder:{i}", block.out_channels)
            enc_out.append(c)
        # skip source for each resolution level: last encoder block at that level
        self.skip_index = self._skip_indices()
        self.decoder = []
        for j in range(cfg.decoder_blocks):
            skip_c = enc_out[self.skip_index[j]]
            squeeze = Conv2d(c + skip_c, cfg.base_channels, 1, rng, dtype=dtype)
            block = DenseBlock(cfg.base_channels, cfg.decoder_layers_per_block, cfg.growth, 1, rng, dtype)
            self.decoder.append([squeeze, block])
            c = tap_channels.get(f"decoder:{j}", block.out_channels)
        self.out_channels = c

    def _skip_indices(self) -> list:
        level_last, level = {}, 0
        for i, s in enumerate(self.cfg.encoder_strides):
            if s == 2:
                level += 1
            level_last[level] = i
        n = self.cfg.n_down
        return [level_last[n - 1 - j] for j in range(self.cfg.decoder_blocks)]

    def tap_shapes(self, h: int, w: int) -> dict:
        shapes, level = {}, 0
        for i, s in enumerate(self.cfg.encoder_strides):
            level += s == 2
            shapes[f"encoder:{i}"] = (h >> level, w >> level)
        for j in range(self.cfg.decoder_blocks):
            level -= 1
            shapes[f"decoder:{j}"] = (h >> level, w >> level)
        return shapes

    def __call__(self, img: Tensor, callbacks: Optional[Dict[str, Callable]] = None) -> Tensor:
        callbacks = callbacks or {}
        _, h, w = img.shape
        ts = self.cfg.total_stride
        if h % ts or w % ts:
            raise ConfigurationError(f"range image {h}x{w} not divisible by total stride {ts}")
        x = T.relu(self.stem(img))
        enc = []
        for i, block in enumerate(self.encoder):
            x = block(x)
            cb = callbacks.get(f"encoder:{i}")
            if cb is not None:
                x = cb(x)
            enc.append(x)
        for j, (squeeze, block) in enumerate(self.decoder):
            skip = enc[self.skip_index[j]]
            x = T.bilinear_resize(x, skip.shape[1], skip.shape[2])
            x = T.relu(squeeze(T.concat([x, skip], axis=0)))
            x = block(x)
            cb = callbacks.get(f"decoder:{j}")
            if cb is not None:
                x = cb(x)
        return x


def range_stream_forward(img: RangeImage, stream: RangeStream, fusion_callbacks=None) -> Tensor:
    return stream(img.channels if isinstance(img, RangeImage) else img, fusion_callbacks)


class PRFusionBlock(Module):
    """Sample range features at points, fuse with point features, write back to both views."""

    def __init__(self, point_channels: int, range_channels: int, widths: Sequence[int], rng,
                 dtype=np.float64):
        self.mlp = MLP(point_channels + range_channels, widths, rng, dtype)
        self.project = Conv2d(range_channels, self.mlp.out_features, 1, rng, dtype=dtype)
        self.out_channels = self.mlp.out_features

    def __call__(self, point_feats: Tensor, range_feats: Tensor, table: IndexTable):
        if point_feats.shape[0] != table.n_points:
            raise ContractError(
                f"{point_feats.shape[0]} point feature rows but the index table has {table.n_points} points")
        hh, ww = range_feats.shape[1:]
        scale = hh / table.h
        if not math.isclose(ww / table.w, scale, rel_tol=1e-12):
            raise ConfigurationError(f"range features {hh}x{ww} are not a uniform downscale of {table.h}x{table.w}")
        sampled = point_features_from_range(range_feats, table)
        fused = self.mlp(T.concat([point_feats, sampled], axis=1))
        cm = fused.shape[1]
        base = T.relu(self.project(range_feats))
        owners, pix, _, _ = owner_targets(table, scale)
        if owners.size == 0:
            return fused, base
        written = T.scatter_rows(T.gather_rows(fused, owners), pix, hh * ww)
        mask = np.zeros((hh * ww, 1), dtype=bool)
        mask[pix] = True
        rows = T.transpose(T.reshape(base, (cm, hh * ww)))
        merged = T.where(mask, written, rows)
        return fused, T.reshape(T.transpose(merged), (cm, hh, ww))


def pr_fusion_block(point_feats, range_feats, table, block: PRFusionBlock):
    return block(point_feats, range_feats, table)


def point_input_features(pc: PointCloud, dtype=np.float64) -> Tensor:
    """Raw per-point inputs (range, x, y, z, intensity), the same layout as the range image."""
    r = np.linalg.norm(pc.xyz, axis=1, keepdims=True)
    return Tensor(np.concatenate([r, pc.xyz, pc.intensity[:, None]], axis=1).astype(dtype))


class PointRangeModule(Module):
    """Both streams plus the three fusion blocks.

    Point MLP stage ``i`` runs just before fusion ``i`` (for as many stages
    as configured); the output is the late fusion's point features.
    """

    def __init__(self, range_cfg: RangeStreamConfig, point_cfg: PointStreamConfig,
                 stages: Sequence[FusionStageSpec], rng, dtype=np.float64, point_in: int = 5):
        stages = list(stages)
        if sorted(s.stage for s in stages) != ["early", "late", "middle"]:
            raise ConfigurationError("exactly one early, middle and late fusion stage is required")
        order = {"early": 0, "middle": 1, "late": 2}
        self.stages = sorted(stages, key=lambda s: order[s.stage])
        taps = [s.range_tap for s in self.stages]
        if len(set(taps)) != 3:
            raise ConfigurationError(f"fusion taps must be distinct, got {taps}")
        tap_channels = {s.range_tap: s.fusion_mlp_widths[-1] for s in self.stages}
        self.range_stream = RangeStream(range_cfg, rng, tap_channels=tap_channels, dtype=dtype)
        self._check_tap_order()

        # range channels arriving at each tap, before replacement
        probe = _channel_probe(range_cfg, tap_channels)
        self.point_mlps, self.fusions = [], []
        cp = point_in
        for i, spec in enumerate(self.stages):
            if i < len(point_cfg.mlp_widths):
                mlp = MLP(cp, [point_cfg.mlp_widths[i]], rng, dtype)
                self.point_mlps.append(mlp)
                cp = mlp.out_features
            block = PRFusionBlock(cp, probe[spec.range_tap], spec.fusion_mlp_widths, rng, dtype)
            self.fusions.append(block)
            cp = block.out_channels
        self.out_channels = cp

    def _check_tap_order(self):
        def rank(tap):
            kind, idx = parse_tap(tap)
            return (kind == "decoder", idx)

        ranks = [rank(s.range_tap) for s in self.stages]
        if ranks != sorted(ranks):
            raise ConfigurationError("fusion taps must be ordered early < middle < late along the range stream")

    def __call__(self, point_in: Tensor, img: Tensor, table: IndexTable) -> Tensor:
        if point_in.shape[0] != table.n_points:
            raise ContractError(f"{point_in.shape[0]} points but index table has {table.n_points}")
        state = {"p": point_in}

        def make_cb(i):
            def cb(range_feats):
                p = state["p"]
                if i < len(self.point_mlps):
                    p = self.point_mlps[i](p)
                p, r = self.fusions[i](p, range_feats, table)
                state["p"] = p
                return r
            return cb

        callbacks = {spec.range_tap: make_cb(i) for i, spec in enumerate(self.stages)}
        self.range_stream(img, callbacks)
        return state["p"]


def _channel_probe(cfg: RangeStreamConfig, tap_channels: dict) -> dict:
    """Channel count each tap receives from the range stream."""
    c = cfg.base_channels
    seen, enc = {}, []
    for i, n in enumerate(cfg.encoder_layers_per_block):
        c = c + n * cfg.growth
        seen[f"encoder:{i}"] = c
        c = tap_channels.get(f"encoder:{i}", c)
        enc.append(c)
    for j in range(cfg.decoder_blocks):
        c = cfg.base_channels + cfg.decoder_layers_per_block * cfg.growth
        seen[f"decoder:{j}"] = c
        c = tap_channels.get(f"decoder:{j}", c)
    return seen


def point_range_module_forward(pc: PointCloud, img: RangeImage, table: IndexTable,
                               module: PointRangeModule) -> Tensor:
    dtype = module.range_stream.stem.weight.dtype
    channels = img.channels if img.channels.dtype == dtype else Tensor(img.channels.data.astype(dtype))
    return module(point_input_features(pc, dtype), channels, table)
