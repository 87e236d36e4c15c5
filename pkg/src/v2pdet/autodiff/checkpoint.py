"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic   8 bytes  b"V2PCKPT\\0"
    version u32
    meta    u32 length + UTF-8 JSON
    count   u32
    count x { u32 name length, UTF-8 name, u32 ndim, ndim x u64 extents,
              prod(extents) x float64 little-endian }
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"V2PCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, arrays: dict, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load(path) -> tuple[dict, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if pos + meta_len > len(buf):
        raise CheckpointError(f"{path}: truncated at byte {pos}")
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return arrays, meta
