"""Binary checkpoint format.

Layout (little-endian): ``b"SPNT"`` + version byte ``0x01``; ``u32`` entry
count; per entry ``u16`` name length, UTF-8 name, ``u8`` rank, ``u32`` per
dimension, then the float32 values in row-major order.
"""
from __future__ import annotations

import os
import struct
from typing import Dict, Mapping

import numpy as np

MAGIC = b"SPNT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(tensors: Mapping[str, np.ndarray], path) -> None:
    chunks = [MAGIC, bytes([VERSION]), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"name too long: {name[:40]}...")
        value = np.asarray(value)
        if value.ndim > 0xFF or any(d > 0xFFFFFFFF for d in value.shape):
            raise CheckpointError(f"dimension overflow for {name}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 5 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint")
    if data[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data[4]}")
    pos = 5

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        out = data[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        if size * 4 > len(data) - pos:
            raise CheckpointError(f"truncated checkpoint (entry {name!r} declares {size} values)")
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    if pos != len(data):
        raise CheckpointError("trailing bytes after last entry")
    return out
