"""Binary parameter checkpoints.

Layout (all little-endian)::

    b"FVLA" | u32 version | records...
    record := u16 name_len | utf-8 name | u8 rank | u32 extents[rank] | f64 payload
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FVLA"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (at byte {offset})")


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"parameter {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8:
        raise CheckpointError(f"truncated header: need 8 bytes, have {len(buf)}", 0)
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    pos = 8
    params: dict[str, np.ndarray] = {}

    def need(n: int, what: str):
        if pos + n > len(buf):
            raise CheckpointError(
                f"truncated {what}: expected {n} bytes, {len(buf) - pos} available", pos)

    while pos < len(buf):
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1, "name")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        need(8 * count, f"payload of {name!r}")
        params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return params


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> str:
    """Write ``params`` and return the sha256 of the bytes written."""
    data = encode_checkpoint(params)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
