"""Binary checkpoint container.

Little-endian layout: magic "CSCN", u32 format version, length-prefixed
UTF-8 config text (key=value lines), u32 tensor count, then per tensor a
length-prefixed name, u32 rank, u32 dims, and raw float64 data; the file
ends with a CRC-32 of every preceding byte.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CSCN"
VERSION = 1


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def save_checkpoint(path, pairs: list[tuple[str, str]],
                    tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write config key=value pairs and named float64 arrays."""
    chunks = [MAGIC, _u32(VERSION)]
    text = "".join(f"{k}={v}\n" for k, v in pairs).encode("utf-8")
    chunks.append(_u32(len(text)))
    chunks.append(text)
    chunks.append(_u32(len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        chunks.append(_u32(len(raw)))
        chunks.append(raw)
        arr = np.asarray(arr)
        chunks.append(_u32(arr.ndim))
        for d in arr.shape:
            chunks.append(_u32(d))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(chunks)
    payload = body + _u32(zlib.crc32(body))
    Path(path).write_bytes(payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[list[tuple[str, str]], dict[str, np.ndarray]]:
    """Read back (config pairs, {name: float64 array}); verifies the CRC."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise CheckpointError("checkpoint truncated")
    body, tail = blob[:-4], blob[-4:]
    if struct.unpack("<I", tail)[0] != zlib.crc32(body):
        raise CheckpointError("checksum mismatch: checkpoint corrupt or truncated")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    text = r.take(r.u32()).decode("utf-8")
    pairs = []
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        pairs.append((key, value))
    tensors: dict[str, np.ndarray] = {}
    count = r.u32()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
        data = np.frombuffer(r.take(n_bytes), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor blob")
    return pairs, tensors
