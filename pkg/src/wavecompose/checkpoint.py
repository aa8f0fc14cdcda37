"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    b"WCKP"  u16 version
    u32 meta_length, meta_length bytes of UTF-8 JSON
    u32 array_count, then per array:
        u16 name_length, name (UTF-8), u8 ndim, ndim x u32 dims,
        prod(dims) x float64
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"WCKP"
VERSION = 1


def dumps(meta: dict, arrays: dict) -> bytes:
    out = bytearray(MAGIC + struct.pack("<H", VERSION))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        out += struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def loads(blob: bytes):
    """Return ``(meta, arrays)``; raises :class:`FormatError` on any inconsistency."""
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {VERSION})", 4)
    if len(blob) < 14:
        raise FormatError("checkpoint truncated", len(blob))
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    body = blob[:-4]
    pos = 6

    def need(n):
        if pos + n > len(body):
            raise FormatError("checkpoint truncated", pos)

    need(4)
    (meta_len,) = struct.unpack_from("<I", body, pos)
    pos += 4
    need(meta_len)
    try:
        meta = json.loads(body[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt metadata block", pos) from None
    pos += meta_len
    need(4)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        need(2)
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        need(name_len + 1)
        name = body[pos:pos + name_len].decode("utf-8", errors="replace")
        pos += name_len
        ndim = body[pos]
        pos += 1
        need(4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 8
        need(size)
        arrays[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(body):
        raise FormatError("trailing bytes after last array", pos)
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch", len(body))
    return meta, arrays


def save(path, meta: dict, arrays: dict) -> None:
    Path(path).write_bytes(dumps(meta, arrays))


def load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
