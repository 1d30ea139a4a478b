"""Little-endian binary reading/writing shared by the file formats."""
from __future__ import annotations

import os
import struct

from .errors import FormatError

__all__ = ["Reader", "atomic_write"]


class Reader:
    """Cursor over a byte buffer; truncation raises with the byte offset."""

    def __init__(self, buf: bytes, what: str = "file"):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what} while reading {field}",
                              offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, field: str) -> int:
        return struct.unpack("<B", self.take(1, field))[0]

    def u16(self, field: str) -> int:
        return struct.unpack("<H", self.take(2, field))[0]

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]

    def u64(self, field: str) -> int:
        return struct.unpack("<Q", self.take(8, field))[0]

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"trailing bytes after {self.what} content",
                              offset=self.pos)


def atomic_write(path, blob: bytes) -> None:
    """Write via a temp file and rename, so readers never see half a file."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
