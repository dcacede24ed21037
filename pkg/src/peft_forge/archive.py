"""Binary weight archive (PFWA v1).

Layout, all integers little-endian:

    magic   4 bytes  b"PFWA"
    version u32      1
    count   u64      number of tensors
    per tensor:
        name_len u16
        name     UTF-8 bytes
        rank     u8
        dims     rank x u64
        offset   u64   byte offset into the payload region
    payload: concatenated little-endian float32 data

Offsets are relative to the start of the payload region, which begins
immediately after the last header entry.
"""

from __future__ import annotations

import io
import struct
from typing import Dict

import numpy as np

MAGIC = b"PFWA"
VERSION = 1


class ArchiveError(ValueError):
    pass


def save_archive(path, tensors: Dict[str, np.ndarray]) -> None:
    """Write tensors (insertion order preserved) to a PFWA file."""
    header = io.BytesIO()
    payload = io.BytesIO()
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {name!r}")
        header.write(struct.pack("<H", len(nb)))
        header.write(nb)
        header.write(struct.pack("<B", arr.ndim))
        header.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        header.write(struct.pack("<Q", offset))
        payload.write(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(tensors)))
        f.write(header.getvalue())
        f.write(payload.getvalue())


def load_archive(path) -> Dict[str, np.ndarray]:
    """Read a PFWA file into an ordered name -> float32 array map."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ArchiveError(f"bad magic bytes {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    (count,) = struct.unpack_from("<Q", blob, 8)
    pos = 16
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        entries.append((name, shape, offset))
    payload_start = pos
    out: Dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = payload_start + offset
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=start)
        if name in out:
            raise ArchiveError(f"duplicate tensor name '{name}'")
        out[name] = arr.reshape(shape).copy()
    return out
