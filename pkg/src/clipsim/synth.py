"""Procedural benchmark: videos of moving colored rectangles.

Each video is a sequence of shots. The background color changes per
shot; the rectangle colors stay fixed for the life of the video, so
the palette (relative to whatever background it sits on) is the
stable identity signal while background, brightness, and motion vary.
Query videos get derived near-duplicate variants of graded severity:
plain temporal trims (ND), trims with small shifts and channel-wise
color casts (DS), stronger shifts and casts (CS), and horizontal
flips (IS). The mapping mirrors duplicate-scene / complementary-scene
/ incident-scene retrieval labels.

Everything is a pure function of the seed; regenerating a dataset
produces byte-identical files.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .clipio import write_video
from .errors import ConfigError
from .rng import Rng
from .simlearn import hflip

__all__ = ["FRAME_SIZE", "LABEL_NAMES", "build_corpus", "generate",
           "load_manifest"]

FRAME_SIZE = 16
LABEL_NAMES = ("ND", "DS", "CS", "IS")

_BASE_LEN = (72, 97)     # video length range, keeps every variant >= 56
_SHOT_LEN = (4, 9)       # frames per shot; most 8-frame clips span a cut
_BACKGROUND = (0.2, 0.95)   # per-shot RGB, each channel drawn separately


def _shot_lengths(total: int, rng: Rng) -> list:
    out = []
    left = total
    while left > 0:
        n = int(rng.integers(*_SHOT_LEN))
        if left - n < _SHOT_LEN[0]:
            n = left
        out.append(n)
        left -= n
    return out


def _render_video(length: int, palette: np.ndarray, rng: Rng) -> np.ndarray:
    """Shots of drifting rectangles over a flat color background."""
    frames = np.empty((length, FRAME_SIZE, FRAME_SIZE, 3), np.float32)
    t0 = 0
    for si, n in enumerate(_shot_lengths(length, rng)):
        sr = rng.split(f"shot{si}")
        frames[t0:t0 + n] = sr.uniform(*_BACKGROUND, size=3).astype(np.float32)
        for ci, color in enumerate(palette):
            rr = sr.split(f"rect{ci}")
            w = int(rr.integers(5, 10))
            h = int(rr.integers(5, 10))
            x0 = int(rr.integers(0, FRAME_SIZE - w + 1))
            y0 = int(rr.integers(0, FRAME_SIZE - h + 1))
            vx = int(rr.integers(-2, 3))
            vy = int(rr.integers(-2, 3))
            for t in range(n):
                x = (x0 + vx * t) % (FRAME_SIZE - w + 1)
                y = (y0 + vy * t) % (FRAME_SIZE - h + 1)
                frames[t0 + t, y:y + h, x:x + w] = color
        t0 += n
    return frames


def _base_video(rng: Rng) -> np.ndarray:
    length = int(rng.split("len").integers(*_BASE_LEN))
    n_rects = int(rng.split("count").integers(2, 4))
    palette = rng.split("palette").uniform(0.05, 1.0, size=(n_rects, 3))
    return _render_video(length, palette.astype(np.float32),
                         rng.split("render"))


def _shift(frames: np.ndarray, dx: int, dy: int) -> np.ndarray:
    return np.roll(np.roll(frames, dx, axis=2), dy, axis=1)


def _cast(frames: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.clip(frames + delta.astype(np.float32), 0.0, 1.0)


def _signed_cast(rng: Rng, low: float, high: float) -> np.ndarray:
    """Independent signed offset per color channel."""
    mag = rng.uniform(low, high, size=3)
    signs = np.array([1.0 if rng.split(f"sign{c}").coin() else -1.0
                      for c in range(3)])
    return mag * signs


def _variant(frames: np.ndarray, label: str, rng: Rng) -> np.ndarray:
    """Derive one near-duplicate of graded severity from query frames."""
    if label == "ND":
        trim = int(rng.integers(2, 7))
        return frames[:-trim].copy()
    if label == "DS":
        trim = int(rng.integers(2, 7))
        out = _shift(frames[trim:], int(rng.integers(1, 3)), 0)
        return _cast(out, _signed_cast(rng, 0.05, 0.10))
    if label == "CS":
        front = int(rng.integers(2, 6))
        back = int(rng.integers(2, 6))
        out = _shift(frames[front:-back], int(rng.integers(2, 4)),
                     int(rng.integers(1, 3)))
        return _cast(out, _signed_cast(rng, 0.10, 0.18))
    if label == "IS":
        trim = int(rng.integers(2, 7))
        out = hflip(frames[trim:])
        out = _shift(out, int(rng.integers(1, 3)), 0)
        return _cast(out, _signed_cast(rng, 0.08, 0.15))
    raise ConfigError(f"unknown variant label '{label}'")


def build_corpus(seed: int, corpus: int = 200, queries: int = 20,
                 per_label: int = 2):
    """In-memory dataset: (videos, manifest, annotations).

    The corpus is queries + their labeled variants + distractors;
    `corpus` must leave room for at least the first two groups.
    """
    if queries < 1 or corpus < 1 or per_label < 1:
        raise ConfigError("corpus, queries, and per_label must be positive")
    need = queries * (1 + len(LABEL_NAMES) * per_label)
    if corpus < need:
        raise ConfigError(f"corpus of {corpus} cannot hold {queries} queries "
                          f"with {per_label} variants per label "
                          f"(needs >= {need})")
    root = Rng(seed)
    videos: dict[str, np.ndarray] = {}
    records: dict[str, dict] = {}
    annotations: dict[str, dict] = {}
    for qi in range(queries):
        qid = f"q{qi:03d}"
        qrng = root.split(f"video:{qid}")
        frames = _base_video(qrng)
        videos[qid] = frames
        records[qid] = {"role": "query", "frames": int(frames.shape[0]),
                        "source": None, "label": None}
        annotations[qid] = {}
        for label in LABEL_NAMES:
            for j in range(per_label):
                vid = f"{qid}_{label.lower()}{j}"
                vrng = root.split(f"variant:{vid}")
                var = np.ascontiguousarray(_variant(frames, label, vrng))
                videos[vid] = var
                records[vid] = {"role": "variant",
                                "frames": int(var.shape[0]),
                                "source": qid, "label": label}
                annotations[qid][vid] = label
    for di in range(corpus - need):
        vid = f"d{di:03d}"
        frames = _base_video(root.split(f"video:{vid}"))
        videos[vid] = frames
        records[vid] = {"role": "distractor", "frames": int(frames.shape[0]),
                        "source": None, "label": None}
    manifest = {"seed": seed, "corpus": corpus, "queries": queries,
                "per_label": per_label,
                "query_ids": [f"q{qi:03d}" for qi in range(queries)],
                "videos": records}
    return videos, manifest, {"queries": annotations}


def _dump_json(path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def generate(out_dir, seed: int, corpus: int = 200, queries: int = 20,
             per_label: int = 2) -> dict:
    """Write the dataset under `out_dir`; returns the manifest.

    Layout: videos/<id>.cslc raw clip files, manifest.json,
    annotations.json.
    """
    videos, manifest, annotations = build_corpus(seed, corpus, queries,
                                                 per_label)
    video_dir = os.path.join(out_dir, "videos")
    os.makedirs(video_dir, exist_ok=True)
    for vid in sorted(videos):
        write_video(os.path.join(video_dir, f"{vid}.cslc"), videos[vid])
    _dump_json(os.path.join(out_dir, "manifest.json"), manifest)
    _dump_json(os.path.join(out_dir, "annotations.json"), annotations)
    return manifest


def load_manifest(out_dir) -> dict:
    with open(os.path.join(out_dir, "manifest.json"), "r",
              encoding="utf-8") as f:
        return json.load(f)
