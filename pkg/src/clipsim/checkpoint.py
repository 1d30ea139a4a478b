"""Binary checkpoint format for model parameters.

Layout (little-endian): magic ``CSLW``, version u32, parameter count
u32, then per parameter: name length u16, UTF-8 name, rank u8, one u32
per dimension, and the float32 payload. Roundtrips are bit-exact,
including parameter order.
"""
from __future__ import annotations

import struct

import numpy as np

from .binio import Reader, atomic_write
from .errors import FormatError
from .tensor import Tensor

__all__ = ["save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC"]

CHECKPOINT_MAGIC = b"CSLW"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: dict, path) -> None:
    """Write `{name: Tensor}` to `path` atomically (temp file + rename)."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(params))
    for name, t in params.items():
        data = np.ascontiguousarray(t.data, dtype=np.float32)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", data.ndim)
        for d in data.shape:
            blob += struct.pack("<I", d)
        blob += data.tobytes()
    atomic_write(path, bytes(blob))


def load_checkpoint(path) -> dict:
    """Read a checkpoint; raises FormatError with a byte offset on damage."""
    with open(path, "rb") as f:
        buf = f.read()
    r = Reader(buf, "checkpoint")
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    count = r.u32("parameter count")
    params = {}
    for i in range(count):
        nlen = r.u16(f"name length of parameter {i}")
        name = r.take(nlen, f"name of parameter {i}").decode("utf-8")
        rank = r.u8(f"rank of '{name}'")
        shape = tuple(r.u32(f"dim of '{name}'") for _ in range(rank))
        n = 1
        for d in shape:
            n *= d
        payload = r.take(4 * n, f"payload of '{name}'")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
        params[name] = Tensor._wrap(arr.astype(np.float32))
    r.expect_end()
    return params
