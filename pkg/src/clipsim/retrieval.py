"""Corpus management and retrieval evaluation.

Videos are cut into consecutive 8-frame clips (a short trailing
remainder is padded by repeating its last frame). Each video's clip
embeddings live in a binary feature store; queries rank every other
video by top-k clip similarity, and evaluation reports average
precision per query and mAP per task over FIVR-style annotations.

Feature store layout (little-endian): magic ``CSF1``, version u32=1,
dim u32, video count u64; per video: id length u16, UTF-8 id, clip
count u32, clip_count*dim float32 values.

Annotation file: UTF-8 JSON ``{"queries": {qid: {vid: label}}}`` with
labels ND, DS, CS, IS. Task relevant-label sets are nested:
DSVR {ND, DS} < CSVR {+CS} < ISVR {+IS}.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, atomic_write
from .errors import (ContractError, FormatError, IntegrityError, MetricError,
                     UnknownIdError)
from .similarity import CostCounter, topk_cs

__all__ = [
    "CLIP_LEN", "STORE_MAGIC", "TASK_LABELS",
    "clip_boundaries", "video_to_clips", "CorpusIndex",
    "write_store", "read_store",
    "AnnotationSet", "load_annotations",
    "rank_query", "average_precision", "EvalResult", "evaluate",
    "storage_reduction",
]

CLIP_LEN = 8
STORE_MAGIC = b"CSF1"
STORE_VERSION = 1
ROW_NORM_TOL = 1e-4

TASK_LABELS = {
    "DSVR": frozenset({"ND", "DS"}),
    "CSVR": frozenset({"ND", "DS", "CS"}),
    "ISVR": frozenset({"ND", "DS", "CS", "IS"}),
}
_VALID_LABELS = frozenset({"ND", "DS", "CS", "IS"})


def clip_boundaries(frame_count: int, clip_len: int = CLIP_LEN):
    """[start, end) windows covering all frames; the last may be short."""
    if frame_count < 1:
        raise ContractError(f"empty video: frame_count = {frame_count}")
    return [(s, min(s + clip_len, frame_count))
            for s in range(0, frame_count, clip_len)]


def video_to_clips(frames: np.ndarray, clip_len: int = CLIP_LEN) -> np.ndarray:
    """Split (T, H, W, 3) frames into (n, clip_len, H, W, 3) clips.

    A trailing remainder is padded to clip_len by repeating its last
    frame, so no content is dropped.
    """
    frames = np.asarray(frames)
    clips = []
    for s, e in clip_boundaries(frames.shape[0], clip_len):
        w = frames[s:e]
        if e - s < clip_len:
            pad = np.repeat(w[-1:], clip_len - (e - s), axis=0)
            w = np.concatenate([w, pad], axis=0)
        clips.append(w)
    return np.stack(clips)


class CorpusIndex:
    """Immutable map video id -> (n_clips, D) unit-norm embedding matrix.

    Ids iterate in lexicographic order so every downstream walk is
    deterministic.
    """

    def __init__(self, matrices: dict):
        if not matrices:
            raise ContractError("empty corpus index")
        dims = set()
        clean = {}
        for vid in sorted(matrices):
            mat = np.ascontiguousarray(matrices[vid], dtype=np.float32)
            if mat.ndim != 2 or mat.shape[0] < 1:
                raise IntegrityError(
                    f"video '{vid}' has invalid clip matrix shape {mat.shape}")
            norms = np.linalg.norm(mat.astype(np.float64), axis=1)
            bad = np.abs(norms - 1.0) > ROW_NORM_TOL
            if np.any(bad):
                row = int(np.argmax(bad))
                raise IntegrityError(
                    f"video '{vid}' row {row} has norm {norms[row]:.6f}, "
                    "expected 1")
            dims.add(mat.shape[1])
            clean[vid] = mat
        if len(dims) != 1:
            raise IntegrityError(f"mixed embedding dims in corpus: {sorted(dims)}")
        self._mats = clean
        self.dim = dims.pop()

    @property
    def ids(self):
        return list(self._mats)

    def __len__(self):
        return len(self._mats)

    def __contains__(self, vid):
        return vid in self._mats

    def get(self, vid: str) -> np.ndarray:
        try:
            return self._mats[vid]
        except KeyError:
            raise UnknownIdError(f"video id '{vid}' not in corpus") from None

    def items(self):
        return self._mats.items()

    def clip_count(self, vid: str) -> int:
        return self.get(vid).shape[0]


def write_store(index: CorpusIndex, path) -> None:
    """Serialize a corpus index; bit-exact under read_store."""
    blob = bytearray()
    blob += STORE_MAGIC
    blob += struct.pack("<II", STORE_VERSION, index.dim)
    blob += struct.pack("<Q", len(index))
    for vid, mat in index.items():
        vb = vid.encode("utf-8")
        if len(vb) > 0xFFFF:
            raise FormatError(f"video id too long: {vid[:40]}...")
        blob += struct.pack("<H", len(vb))
        blob += vb
        blob += struct.pack("<I", mat.shape[0])
        blob += np.ascontiguousarray(mat, dtype="<f4").tobytes()
    atomic_write(path, bytes(blob))


def read_store(path) -> CorpusIndex:
    """Load a feature store, validating magic, version, and row norms."""
    with open(path, "rb") as f:
        buf = f.read()
    r = Reader(buf, "feature store")
    magic = r.take(4, "magic")
    if magic != STORE_MAGIC:
        raise FormatError(f"bad feature store magic {magic!r}", offset=0)
    version = r.u32("version")
    if version != STORE_VERSION:
        raise FormatError(f"unsupported feature store version {version}",
                          offset=4)
    dim = r.u32("embedding dim")
    count = r.u64("video count")
    matrices = {}
    for i in range(count):
        idlen = r.u16(f"id length of video {i}")
        vid = r.take(idlen, f"id of video {i}").decode("utf-8")
        nclips = r.u32(f"clip count of '{vid}'")
        payload = r.take(4 * nclips * dim, f"embeddings of '{vid}'")
        mat = np.frombuffer(payload, dtype="<f4").reshape(nclips, dim)
        if vid in matrices:
            raise FormatError(f"duplicate video id '{vid}' in store")
        matrices[vid] = mat.astype(np.float32)
    r.expect_end()
    return CorpusIndex(matrices)


@dataclass
class AnnotationSet:
    """Query relevance labels: query id -> {video id -> label}."""

    queries: dict = field(default_factory=dict)

    def relevant(self, qid: str, task: str) -> set:
        labels = TASK_LABELS[task]
        return {vid for vid, lab in self.queries[qid].items() if lab in labels}


def load_annotations(path) -> AnnotationSet:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"annotation file is not valid JSON: {e}") from e
    if not isinstance(raw, dict) or "queries" not in raw:
        raise FormatError('annotation file lacks a top-level "queries" object')
    queries = raw["queries"]
    if not isinstance(queries, dict):
        raise FormatError('"queries" must be an object')
    for qid, labels in queries.items():
        if not isinstance(labels, dict):
            raise FormatError(f"query '{qid}' must map video ids to labels")
        for vid, lab in labels.items():
            if lab not in _VALID_LABELS:
                raise FormatError(
                    f"query '{qid}', video '{vid}': unknown label '{lab}'")
    return AnnotationSet(queries=queries)


def rank_query(qid: str, index: CorpusIndex, k: int = 3,
               counter: CostCounter | None = None):
    """Score every other video against the query.

    Returns (video id, score) pairs sorted by descending score, ties by
    ascending id; the query itself is excluded.
    """
    q = index.get(qid)
    ranked = [(vid, topk_cs(q, mat, k, counter))
              for vid, mat in index.items() if vid != qid]
    ranked.sort(key=lambda pair: (-pair[1], pair[0]))
    return ranked


def average_precision(ranked_ids, relevant) -> float:
    """AP = (1/|relevant|) * sum of precision at each relevant hit's rank.

    `ranked_ids` is the retrieval order, best first. Relevant ids that
    never appear contribute nothing (they still divide, costing recall).
    """
    relevant = set(relevant)
    if not relevant:
        raise MetricError("average precision is undefined for an empty "
                          "relevant set")
    hits = 0
    total = 0.0
    for rank, vid in enumerate(ranked_ids, start=1):
        if vid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


@dataclass
class EvalResult:
    task: str
    per_query: dict
    map: float
    skipped: int


def evaluate(index: CorpusIndex, annotations: AnnotationSet, task: str,
             k: int = 3, counter: CostCounter | None = None) -> EvalResult:
    """Per-query AP and mAP for one task.

    Queries with no relevant video under the task's label set are
    excluded and counted in `skipped`.
    """
    if task not in TASK_LABELS:
        raise ContractError(f"unknown task '{task}', "
                            f"expected one of {sorted(TASK_LABELS)}")
    per_query = {}
    skipped = 0
    for qid in sorted(annotations.queries):
        if qid not in index:
            raise UnknownIdError(f"query id '{qid}' not in corpus")
        relevant = annotations.relevant(qid, task)
        if not relevant:
            skipped += 1
            continue
        ranked = rank_query(qid, index, k, counter)
        per_query[qid] = average_precision([vid for vid, _ in ranked], relevant)
    if not per_query:
        raise MetricError(f"no query has relevant videos under task {task}")
    mean_ap = sum(per_query.values()) / len(per_query)
    return EvalResult(task=task, per_query=per_query, map=mean_ap,
                      skipped=skipped)


def storage_reduction(frame_counts) -> float:
    """Frame-level vector count over clip-level vector count.

    A frame-level index stores one vector per frame; the clip store
    keeps one per 8-frame window (padded remainder included), so the
    ratio approaches 8 from below as videos grow.
    """
    frame_counts = list(frame_counts)
    if not frame_counts or min(frame_counts) < 1:
        raise ContractError("frame counts must be positive")
    frames = sum(frame_counts)
    clips = sum(math.ceil(t / CLIP_LEN) for t in frame_counts)
    return frames / clips
