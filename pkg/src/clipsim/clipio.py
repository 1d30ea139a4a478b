"""Raw video files: frames as float32 RGB in [0, 1].

Layout (little-endian): magic ``CSLC``, then frame count F, height H,
and width W as u32, followed by F*H*W*3 float32 pixel values in
(frame, row, column, channel) order. One file holds one whole video;
clip windowing happens downstream.
"""
from __future__ import annotations

import struct

import numpy as np

from .binio import Reader, atomic_write
from .errors import ContractError, FormatError

__all__ = ["read_video", "write_video", "VIDEO_MAGIC"]

VIDEO_MAGIC = b"CSLC"


def write_video(path, frames: np.ndarray) -> None:
    """Write an (F, H, W, 3) array of pixels in [0, 1] atomically."""
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ContractError(f"video must be (F, H, W, 3), got {frames.shape}")
    if frames.shape[0] < 1:
        raise ContractError("video has no frames")
    if not np.all(np.isfinite(frames)):
        raise ContractError("video contains non-finite pixels")
    f, h, w, _ = frames.shape
    blob = VIDEO_MAGIC + struct.pack("<III", f, h, w) + frames.tobytes()
    atomic_write(path, blob)


def read_video(path) -> np.ndarray:
    """Read a video file; raises FormatError with a byte offset on damage."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = Reader(buf, "video file")
    magic = r.take(4, "magic")
    if magic != VIDEO_MAGIC:
        raise FormatError(f"bad video magic {magic!r}", offset=0)
    f = r.u32("frame count")
    h = r.u32("height")
    w = r.u32("width")
    if f < 1 or h < 1 or w < 1:
        raise FormatError(f"empty video dimensions {(f, h, w)}", offset=4)
    payload = r.take(4 * f * h * w * 3, "pixel data")
    r.expect_end()
    frames = np.frombuffer(payload, dtype="<f4").reshape(f, h, w, 3)
    if not np.all(np.isfinite(frames)):
        raise FormatError("video contains non-finite pixels")
    return frames.astype(np.float32)
