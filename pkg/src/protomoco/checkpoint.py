"""Binary checkpoint format (all integers little-endian uint32).

    magic     4 bytes  b"PMCK"
    version   uint32   1
    count     uint32   number of parameters
    then per parameter, in sorted name order:
        name_len  uint32
        name      name_len bytes of UTF-8
        rank      uint32
        extents   rank x uint32
        values    prod(extents) x float32 (little-endian, row-major)
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PMCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(arrays)))
    for name in sorted(arrays):
        values = np.asarray(arrays[name])
        encoded = name.encode("utf-8")
        out.write(struct.pack("<I", len(encoded)))
        out.write(encoded)
        out.write(struct.pack(f"<I{values.ndim}I", values.ndim, *values.shape))
        out.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return out.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    pos = 4

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        values = struct.unpack_from(fmt, view, pos)
        pos += size
        return values

    version, count = read("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = read("<I")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = read("<I")
        shape = read(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * n > len(view):
            raise CheckpointError(f"truncated values for {name!r}")
        arrays[name] = np.frombuffer(view[pos:pos + 4 * n], dtype="<f4").reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(view):
        raise CheckpointError("trailing bytes after the last parameter")
    return arrays


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)
