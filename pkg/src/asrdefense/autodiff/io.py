"""ATEN binary tensor files.

Layout: magic ``b"ATEN"``, u32 rank, ``rank`` u32 dims, little-endian f32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATEN"


def save_tensor(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an ATEN file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(raw) - offset != expected:
        raise ValueError(f"{path}: payload is {len(raw) - offset} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)
