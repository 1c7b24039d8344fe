"""Flat binary parameter container.

Layout (little-endian): magic ``CTSK1``, then one record per tensor until end
of file: u32 name length, UTF-8 name, u32 rank, rank x u64 extents, float64
values in C order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import HeaderError, IoError

MAGIC = b"CTSK1"


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:5] != MAGIC:
        raise HeaderError("not a CTSK1 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = 5
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise HeaderError(f"checkpoint truncated inside {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise HeaderError(f"corrupt checkpoint: {exc}") from exc
    return out


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    try:
        Path(path).write_bytes(encode_checkpoint(params))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_checkpoint(blob)
