"""Binary checkpoint format.

Layout (little-endian): magic ``FGLN``, u32 version, u32 entry count, then per
entry u16 name length, UTF-8 name, u8 rank, rank × u32 extents, raw f64 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FGLN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an FGLN checkpoint (bad magic)")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated data for {name!r} at byte {pos}")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8,
                                          offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}") from exc
    return tensors


def save(path, tensors: dict) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict:
    return loads(Path(path).read_bytes())
