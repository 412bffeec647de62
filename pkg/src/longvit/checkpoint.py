"""Flat binary weight checkpoints.

Layout: magic ``b"LVT1"`` followed by one record per parameter, in
lexicographic name order::

    u32 LE   name length in bytes
    bytes    UTF-8 name
    u32 LE   rank
    u64 LE   extent, repeated ``rank`` times
    f64 LE   payload, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FileFormatError
from .tensor import Tensor

MAGIC = b"LVT1"


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(params):
            value = params[name]
            arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FileFormatError(f"{path}: not an LVT1 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = 4
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise FileFormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise FileFormatError(f"{path}: truncated checkpoint") from exc
    return out
