"""Flat binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"FSEGCKPT"
    version      uint32
    manifest     uint32 length + UTF-8 JSON (may be "{}")
    count        uint32
    count times:
        name     uint32 length + UTF-8 bytes
        shape    4 x int64
        elements prod(shape) x float64, row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSEGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], manifest: dict | None = None) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta = json.dumps(manifest or {}, sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 4:
            raise CheckpointError(f"parameter {name!r} must be 4-D, got shape {arr.shape}")
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<4q", *arr.shape),
                   np.ascontiguousarray(arr).tobytes()]
    return b"".join(chunks)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, have {len(buf) - pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (mlen,) = struct.unpack("<I", take(4))
    manifest = json.loads(take(mlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        shape = struct.unpack("<4q", take(32))
        if min(shape) < 0:
            raise CheckpointError(f"negative dimension in shape {shape} for {name!r}")
        size = int(np.prod(shape))
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last parameter")
    return arrays, manifest


def save(path, arrays: dict[str, np.ndarray], manifest: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, manifest))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
