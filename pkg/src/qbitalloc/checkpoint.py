"""Binary checkpoint format.

Layout (all integers little-endian)::

    "GFB1"                      magic, 4 bytes
    u32 version
    u32 tensor count
    per tensor:
        u16 name length, name (utf-8)
        u8 ndim, u32 dims[ndim]
        f64 values (C order, little-endian)
    u32 metadata length, metadata (utf-8 JSON, sorted keys)
    u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

MAGIC = b"GFB1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def encode_checkpoint(tensors: Mapping[str, np.ndarray], meta: Dict[str, Any]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Tuple["OrderedDict[str, np.ndarray]", Dict[str, Any]]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode("utf-8"))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes before the checksum")
    return tensors, meta


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Dict[str, Any]) -> bytes:
    payload = encode_checkpoint(tensors, meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return payload


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
