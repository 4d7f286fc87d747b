"""Raw tensor files: XCUB magic, u32 rank, u32 extents, float32 payload, CRC32.

All integers and floats are little-endian; payloads are row-major float32.
The trailing u32 is zlib.crc32 of the payload bytes.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"XCUB"
_MAX_RANK = 8


class SchemaError(ValueError):
    """File or metadata does not match the container schema."""


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim == 0 or arr.ndim > _MAX_RANK:
        raise SchemaError(f"tensor rank {arr.ndim} outside 1..{_MAX_RANK}")
    payload = arr.tobytes()
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(header + payload + crc)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise SchemaError(f"{path}: bad magic")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank == 0 or rank > _MAX_RANK:
        raise SchemaError(f"{path}: bad rank {rank}")
    head_end = 8 + 4 * rank
    if len(raw) < head_end + 4:
        raise SchemaError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(shape, dtype=np.int64))
    payload_end = head_end + 4 * count
    if len(raw) != payload_end + 4:
        raise SchemaError(f"{path}: size mismatch for shape {shape}")
    payload = raw[head_end:payload_end]
    (crc_stored,) = struct.unpack_from("<I", raw, payload_end)
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc_stored:
        raise SchemaError(f"{path}: payload CRC mismatch")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return np.ascontiguousarray(arr, dtype=np.float32)
