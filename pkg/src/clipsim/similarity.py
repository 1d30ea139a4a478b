"""Video-to-video similarity over sets of clip embeddings.

A video is an (n, D) matrix of unit-norm clip vectors ordered by start
time. Scores reduce the n x m matrix of pairwise dot products: the
chamfer score averages each query clip's best match, and the top-k
variant keeps only the k strongest of those row maxima, which keeps one
junk clip in a long video from dragging the score down.

The similarity matrix and the row maxima are computed in float32; the
final mean reduces in float64. That pins a deterministic summation
order, so the k >= n case of `topk_cs` is bit-identical to `chamfer`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

__all__ = ["DEFAULT_TOP_K", "CostCounter", "sim_matrix", "chamfer", "topk_cs"]

DEFAULT_TOP_K = 3


@dataclass
class CostCounter:
    """Tally of dot products spent on scoring; one entry per (i, j) pair."""

    dots: int = 0


def _as_clip_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-d clip matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} has an empty axis: shape {arr.shape}")
    return arr


def sim_matrix(a, b, counter: CostCounter | None = None) -> np.ndarray:
    """All pairwise clip similarities: (n, D) x (m, D) -> (n, m) float32."""
    a = _as_clip_matrix(a, "A")
    b = _as_clip_matrix(b, "B")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")
    if counter is not None:
        counter.dots += a.shape[0] * b.shape[0]
    return a @ b.T


def topk_cs(a, b, k: int = DEFAULT_TOP_K,
            counter: CostCounter | None = None) -> float:
    """Mean of the k largest row maxima of the similarity matrix.

    When the query has fewer than k clips, all its row maxima are
    averaged. Sorting is descending with ties broken by lower row index;
    the tie rule cannot change the value but makes the reduction order
    reproducible.
    """
    k = int(k)
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    s = sim_matrix(a, b, counter)
    row_max = s.max(axis=1)
    order = np.argsort(-row_max, kind="stable")
    kk = min(k, row_max.shape[0])
    top = row_max[order[:kk]]
    return float(top.sum(dtype=np.float64) / kk)


def chamfer(a, b, counter: CostCounter | None = None) -> float:
    """Mean over query clips of their best match; topk_cs with k = n."""
    a = _as_clip_matrix(a, "A")
    return topk_cs(a, b, k=a.shape[0], counter=counter)
