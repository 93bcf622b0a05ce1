"""Flat binary checkpoint archive.

Layout (all integers little-endian):

    magic    4 bytes  b"PFT1"
    version  u32 length + utf-8 string
    count    u32
    then per tensor:
        name   u32 length + utf-8 string
        ndim   u32
        dims   u64 * ndim
        data   float64 little-endian, row-major

Float payloads round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"PFT1"
VERSION = "posefield-1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, version: str = VERSION) -> None:
    """Write named tensors (Tensor or ndarray) to `path`."""
    out = [MAGIC]
    v = version.encode("utf-8")
    out.append(struct.pack("<I", len(v)))
    out.append(v)
    out.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        n = name.encode("utf-8")
        out.append(struct.pack("<I", len(n)))
        out.append(n)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    """Read a checkpoint; returns (dict name -> float64 ndarray, version string)."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a posefield checkpoint")
    off = 4

    def take(n):
        nonlocal off
        chunk = buf[off : off + n]
        if len(chunk) != n:
            raise CheckpointError(f"{path}: truncated archive")
        off += n
        return chunk

    (vlen,) = struct.unpack("<I", take(4))
    version = take(vlen).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        nelem = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * nelem), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = data
    return tensors, version
