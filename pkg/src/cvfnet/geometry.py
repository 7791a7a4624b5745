"""Spherical projection of point clouds into range images.

A point ``(x, y, z)`` lands at column ``u_f = 0.5 * (1 - atan2(y, x) / pi) * w``
and row ``v_f = (1 - (elevation - fov_down) / fov) * h`` so the highest beam is
row 0. The projection also yields an :class:`IndexTable` linking every point
to its pixel and every occupied pixel to the nearest point that hit it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DegeneratePointError, DimensionError, EmptyImageError, ParseError
from .tensor import Tensor


@dataclass(frozen=True)
class SphericalConfig:
    h: int = 48
    w: int = 512
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(-25.0)

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ConfigurationError(f"range image must be at least 1x1, got {self.h}x{self.w}")
        if not self.fov_up > self.fov_down:
            raise ConfigurationError(f"fov_up ({self.fov_up}) must exceed fov_down ({self.fov_down})")

    @property
    def fov(self) -> float:
        return self.fov_up - self.fov_down


@dataclass
class PointCloud:
    """(N, 4) array of x, y, z, intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise DimensionError(f"point cloud must be (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    @classmethod
    def from_bin(cls, path) -> "PointCloud":
        raw = Path(path).read_bytes()
        if len(raw) % 16:
            raise ParseError(f"size {len(raw)} is not a multiple of 16 bytes", path=path)
        pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
        return cls(pts.astype(np.float64))

    def to_bin(self, path):
        Path(path).write_bytes(self.points.astype("<f4").tobytes())

    @classmethod
    def from_text(cls, path) -> "PointCloud":
        rows = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ParseError(f"expected 3 or 4 values, got {len(parts)}", line=lineno, path=path)
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from exc
            rows.append(vals + [0.0] * (4 - len(vals)))
        return cls(np.array(rows, dtype=np.float64).reshape(-1, 4))


def project_point(p, cfg: SphericalConfig) -> Optional[tuple]:
    """Return ``(u_f, v_f, r)`` for one point, or None when outside the vertical FOV."""
    x, y, z = (float(c) for c in p[:3])
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise DegeneratePointError("point at the sensor origin has no direction")
    elev = math.asin(z / r)
    if elev < cfg.fov_down or elev > cfg.fov_up:
        return None
    u = 0.5 * (1.0 - math.atan2(y, x) / math.pi) * cfg.w
    v = (1.0 - (elev - cfg.fov_down) / cfg.fov) * cfg.h
    return u, v, r


def project_points(xyz: np.ndarray, cfg: SphericalConfig):
    """Vectorised :func:`project_point`. Returns ``u_f, v_f, r, valid``."""
    # contiguous columns: elementwise math on strided views is several times slower
    x, y, z = np.array(np.asarray(xyz, dtype=np.float64)[:, :3].T, order="C")
    r = np.sqrt(x * x + y * y + z * z)
    nonzero = r > 0
    elev = np.arcsin(np.clip(np.divide(z, r, out=np.zeros_like(z), where=nonzero), -1.0, 1.0))
    valid = nonzero & (elev >= cfg.fov_down) & (elev <= cfg.fov_up)
    u = 0.5 * (1.0 - np.arctan2(y, x) / np.pi) * cfg.w
    v = (1.0 - (elev - cfg.fov_down) / cfg.fov) * cfg.h
    return u, v, r, valid


@dataclass
class IndexTable:
    """Point <-> pixel correspondence.

    Per point: integer pixel ``(u, v)`` (-1 when invalid) and the fractional
    coordinates. Per pixel: index of the owning point, -1 when empty.
    """

    h: int
    w: int
    u: np.ndarray
    v: np.ndarray
    u_f: np.ndarray
    v_f: np.ndarray
    valid: np.ndarray
    pixel_to_point: np.ndarray
    r: np.ndarray = field(repr=False, default=None)

    @property
    def n_points(self) -> int:
        return self.u.shape[0]

    def owners(self) -> np.ndarray:
        """Indices of points owning a pixel, ascending."""
        own = self.pixel_to_point.reshape(-1)
        return np.sort(own[own >= 0])

    def point_to_pixel(self, i: int):
        if not self.valid[i]:
            return None
        return int(self.u[i]), int(self.v[i]), float(self.u_f[i]), float(self.v_f[i])

    def permuted(self, perm: np.ndarray) -> "IndexTable":
        """Table for the cloud ``points[perm]``."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        p2p = np.where(self.pixel_to_point >= 0, inv[np.maximum(self.pixel_to_point, 0)], -1)
        return IndexTable(self.h, self.w, self.u[perm], self.v[perm], self.u_f[perm], self.v_f[perm],
                          self.valid[perm], p2p, None if self.r is None else self.r[perm])


@dataclass
class RangeImage:
    config: SphericalConfig
    channels: Tensor
    occupancy: np.ndarray


def _nearest_per_pixel(pix: np.ndarray, r: np.ndarray):
    """Per occupied pixel, the position of its nearest entry (lowest position on ties).

    Returns ``(positions, pixels)`` with pixels ascending.
    """
    order = T.stable_argsort_int(pix)
    ps, rs = pix[order], r[order]
    start = np.ones(ps.size, dtype=bool)
    start[1:] = ps[1:] != ps[:-1]
    starts = np.flatnonzero(start)
    gmin = np.minimum.reduceat(rs, starts)
    counts = np.diff(np.append(starts, ps.size))
    pos = np.where(rs == np.repeat(gmin, counts), np.arange(ps.size), ps.size)
    # stable order keeps positions ascending inside a pixel: first hit is the lowest
    first = np.minimum.reduceat(pos, starts)
    return order[first], ps[starts]


def build_range_image(pc: PointCloud, cfg: SphericalConfig, dtype=np.float64):
    """Project ``pc`` into a (range, x, y, z, intensity) image.

    Pixel collisions keep the nearest point (ties: lowest index).
    """
    n = len(pc)
    if n == 0:
        raise EmptyImageError("point cloud is empty")
    u_f, v_f, r, valid = project_points(pc.xyz, cfg)
    if not valid.any():
        raise EmptyImageError("no point falls inside the vertical field of view")
    idx = np.flatnonzero(valid)
    # valid coordinates are non-negative, so truncation is floor
    ui = np.minimum(u_f[idx].astype(np.int64), cfg.w - 1)
    vi = np.minimum(np.maximum(v_f[idx], 0.0).astype(np.int64), cfg.h - 1)
    u = np.full(n, -1, dtype=np.int64)
    v = np.full(n, -1, dtype=np.int64)
    u[idx] = ui
    v[idx] = vi
    pix = vi * cfg.w + ui
    owners, owner_pix = _nearest_per_pixel(pix, r[idx])
    owners = idx[owners]

    p2p = np.full(cfg.h * cfg.w, -1, dtype=np.int64)
    p2p[owner_pix] = owners
    img = np.zeros((5, cfg.h * cfg.w), dtype=dtype)
    img[0, owner_pix] = r[owners]
    img[1:4, owner_pix] = pc.xyz[owners].T
    img[4, owner_pix] = pc.intensity[owners]
    occupancy = (p2p >= 0).reshape(cfg.h, cfg.w)

    uf = np.where(valid, u_f, np.nan)
    vf = np.where(valid, v_f, np.nan)
    table = IndexTable(cfg.h, cfg.w, u, v, uf, vf, valid, p2p.reshape(cfg.h, cfg.w), r)
    image = RangeImage(cfg, Tensor(img.reshape(5, cfg.h, cfg.w)), occupancy)
    return image, table


def _scale_of(shape_hw, table: IndexTable) -> float:
    hh, ww = shape_hw
    sy, sx = hh / table.h, ww / table.w
    if not math.isclose(sy, sx, rel_tol=1e-12):
        raise ConfigurationError(f"non-uniform scale: rows {sy} vs cols {sx}")
    return sy


def point_features_from_range(range_feats: Tensor, table: IndexTable, scale: Optional[float] = None) -> Tensor:
    """Bilinearly sample a (C, h', w') map at every point's pixel -> (N, C).

    Points outside the FOV get zero rows.
    """
    actual = _scale_of(range_feats.shape[1:], table)
    if scale is not None and not math.isclose(scale, actual, rel_tol=1e-12):
        raise ConfigurationError(f"scale {scale} does not match feature map scale {actual}")
    coords = np.stack([table.u_f * actual, table.v_f * actual], axis=1)
    return T.bilinear_sample(range_feats, coords, mask=table.valid)


def owner_targets(table: IndexTable, scale: float):
    """Owners and their flat pixel index at ``scale``, nearest last.

    Ordered so that a last-write scatter keeps the nearest owner when
    several land on one downscaled pixel.
    """
    owners = table.owners()
    hh = int(round(table.h * scale))
    ww = int(round(table.w * scale))
    if scale == 1.0:
        pix = table.v[owners] * table.w + table.u[owners]
    else:
        pu = np.clip(np.floor(table.u[owners] * scale), 0, ww - 1).astype(np.int64)
        pv = np.clip(np.floor(table.v[owners] * scale), 0, hh - 1).astype(np.int64)
        pix = pv * ww + pu
    if table.r is not None and owners.size:
        order = np.lexsort((-owners, -table.r[owners]))
        owners, pix = owners[order], pix[order]
    return owners, pix, hh, ww


def range_features_from_points(point_feats: Tensor, table: IndexTable, prev: Tensor,
                               scale: float = 1.0) -> Tensor:
    """Write owners' feature rows into their pixels; other pixels keep ``prev``."""
    c = point_feats.shape[1]
    if point_feats.shape[0] != table.n_points:
        raise DimensionError(f"axis 0: {point_feats.shape[0]} feature rows for {table.n_points} points")
    owners, pix, hh, ww = owner_targets(table, scale)
    if prev.shape != (c, hh, ww):
        raise DimensionError(f"prev map has shape {prev.shape}, expected {(c, hh, ww)}")
    if owners.size == 0:
        return prev
    rows = T.gather_rows(point_feats, owners)
    written = T.scatter_rows(rows, pix, hh * ww)
    mask = np.zeros((hh * ww, 1), dtype=bool)
    mask[pix] = True
    base = T.transpose(T.reshape(prev, (c, hh * ww)))
    merged = T.where(mask, written, base)
    return T.reshape(T.transpose(merged), (c, hh, ww))
