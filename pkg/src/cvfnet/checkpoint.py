"""Flat binary weight container.

Layout (all little-endian)::

    b"CVFW"  u32 version
    repeated until EOF:
        u32 name_len, name (UTF-8), u32 rank, rank x u64 dims, float64 payload

Payloads are always written as float64 so single- and double-precision
models round-trip without loss.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatchError

MAGIC = b"CVFW"
VERSION = 1


def save_weights(path, state: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name in state:
            arr = np.asarray(state[name], dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_weights(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointMismatchError(f"{path}: not a CVFW checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointMismatchError(f"{path}: unsupported checkpoint version {version}")
    pos, state = 8, {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos: pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise CheckpointMismatchError(f"{path}: truncated payload for {name!r}")
            state[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointMismatchError(f"{path}: truncated record ({exc})") from exc
    return state
