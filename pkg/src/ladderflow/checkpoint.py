"""LDDR binary checkpoint format.

Layout (little-endian):
  magic "LDDR" | version u32 | config-blob length u32 | config JSON bytes |
  tensor count u32 | per tensor: name length u16, UTF-8 name, dtype tag u8
  (f32 = 1), rank u8, dims u32 each, row-major f32 payload |
  trailing CRC32 (u32) of every preceding byte.

Round-trip is byte-identical; a CRC mismatch on load is a hard error.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"LDDR"
VERSION = 1
DTYPE_F32 = 1


class CheckpointError(ValueError):
    pass


class CrcError(CheckpointError):
    pass


def save_checkpoint(path, config: dict, tensors: dict) -> None:
    """tensors: ordered mapping name -> float32 ndarray."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        # note: ascontiguousarray would promote rank-0 arrays to rank 1
        arr = np.asarray(arr, dtype="<f4", order="C")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(body)


def load_checkpoint(path):
    """Returns (config dict, ordered dict name -> float32 ndarray)."""
    with open(path, "rb") as fh:
        body = fh.read()
    if len(body) < 16 or body[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an LDDR checkpoint")
    stored_crc, = struct.unpack("<I", body[-4:])
    if zlib.crc32(body[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CrcError(f"{path}: CRC mismatch, file is corrupt")
    pos = 4
    version, = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    blob_len, = struct.unpack_from("<I", body, pos)
    pos += 4
    config = json.loads(body[pos:pos + blob_len].decode("utf-8"))
    pos += blob_len
    count, = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        name_len, = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dtype_tag, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        if dtype_tag != DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype tag {dtype_tag} for {name}")
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        tensors[name] = arr.copy()
    if pos != len(body) - 4:
        raise CheckpointError(f"{path}: trailing garbage after tensor table")
    return config, tensors
