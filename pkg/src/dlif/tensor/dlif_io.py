"""DLIF1 binary tensor files.

Layout: 5-byte magic ``DLIF1``, u8 rank, rank x u32 little-endian dims, then
float32 little-endian row-major payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DLIF1"


class FormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(blob: bytes) -> np.ndarray:
    if blob[:5] != MAGIC:
        raise FormatError(f"bad magic {blob[:5]!r}")
    rank = blob[5]
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    offset = 6 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise FormatError(f"payload has {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
