"""Divided space-time attention encoder for 8-frame clips.

A clip is cut into per-frame square patches, each linearly projected to
d_model with learned spatial and temporal position embeddings, plus a
classification token. Every block applies, pre-layernorm and residual:
temporal self-attention (across frames at a fixed spatial index; the
classification token sits out), spatial self-attention (within each
frame; the classification token is copied into every frame's sequence
and its F outputs averaged back), and a gelu MLP. The classification
token then passes through a final layernorm and one linear layer to the
embedding width and is L2-normalized, so downstream dot products are
cosine similarities.

The patch grid can be restricted to a subset of spatial indices
(`visible`), which is how masked pretraining feeds only unmasked tubes
through the encoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .rng import Rng
from .tensor import Tensor

__all__ = [
    "ModelConfig", "as_clip", "frames_to_patches", "patches_to_frames",
    "trunc_normal", "init_encoder_params", "patch_embed", "encode_block",
    "encode_tokens", "encode_clip", "encode_clips", "attention",
]

_VARIANT_DIMS = {"small": 384, "base": 768}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the defaults are the toy test size."""

    frames: int = 8
    image_size: int = 16
    patch_size: int = 8
    d_model: int = 32
    heads: int = 4
    depth: int = 2
    embed_dim: int = 16
    variant: str = "toy"

    def __post_init__(self):
        for name in ("frames", "image_size", "patch_size", "d_model",
                     "heads", "depth", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.variant not in ("toy", *_VARIANT_DIMS):
            raise ConfigError(f"unknown variant '{self.variant}'")
        want = _VARIANT_DIMS.get(self.variant)
        if want is not None and self.embed_dim != want:
            raise ConfigError(
                f"variant '{self.variant}' requires embed_dim {want}, "
                f"got {self.embed_dim}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def spatial_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def patch_values(self) -> int:
        return self.patch_size * self.patch_size * 3


def as_clip(frames, cfg: ModelConfig) -> np.ndarray:
    """Validate (F, H, W, 3) shape and clamp pixel values into [0, 1]."""
    arr = np.asarray(frames, dtype=np.float32)
    want = (cfg.frames, cfg.image_size, cfg.image_size, 3)
    if arr.shape != want:
        raise ConfigError(f"clip shape {arr.shape} does not match "
                          f"configured {want}")
    return np.clip(arr, 0.0, 1.0)


def frames_to_patches(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """(F, H, W, 3) -> (F*S, P*P*3); s runs row-major over the patch grid."""
    f, h, w, c = frames.shape
    g = h // patch_size
    x = frames.reshape(f, g, patch_size, w // patch_size, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(f * g * (w // patch_size),
                                           patch_size * patch_size * c)


def patches_to_frames(patches: np.ndarray, frames: int, image_size: int,
                      patch_size: int) -> np.ndarray:
    """Inverse of frames_to_patches."""
    g = image_size // patch_size
    x = np.asarray(patches).reshape(frames, g, g, patch_size, patch_size, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(frames, image_size, image_size, 3)


def trunc_normal(rng: Rng, shape, std: float = 0.02) -> Tensor:
    """Normal(0, std) clipped to two standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    return Tensor(np.clip(x, -2.0 * std, 2.0 * std).astype(np.float32))


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, np.float32))


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, np.float32))


def _attn_params(rng, d, prefix, params):
    for piece in ("q", "k", "v", "o"):
        params[f"{prefix}.{piece}.w"] = trunc_normal(rng, (d, d))
        params[f"{prefix}.{piece}.b"] = _zeros((d,))


def init_encoder_params(cfg: ModelConfig, rng: Rng) -> dict:
    """Fresh parameters: truncated normal (std 0.02) weights, zero biases."""
    d = cfg.d_model
    p = {}
    p["patch.proj.w"] = trunc_normal(rng.split("patch"), (cfg.patch_values, d))
    p["patch.proj.b"] = _zeros((d,))
    p["pos.spatial"] = trunc_normal(rng.split("pos.s"), (cfg.spatial_patches, d))
    p["pos.temporal"] = trunc_normal(rng.split("pos.t"), (cfg.frames, d))
    p["cls"] = trunc_normal(rng.split("cls"), (1, d))
    for i in range(cfg.depth):
        r = rng.split(f"blk{i}")
        pre = f"blk{i}"
        for ln in ("ln_time", "ln_space", "ln_mlp"):
            p[f"{pre}.{ln}.g"] = _ones((d,))
            p[f"{pre}.{ln}.b"] = _zeros((d,))
        _attn_params(r.split("time"), d, f"{pre}.time", p)
        _attn_params(r.split("space"), d, f"{pre}.space", p)
        p[f"{pre}.mlp.fc1.w"] = trunc_normal(r.split("fc1"), (d, 4 * d))
        p[f"{pre}.mlp.fc1.b"] = _zeros((4 * d,))
        p[f"{pre}.mlp.fc2.w"] = trunc_normal(r.split("fc2"), (4 * d, d))
        p[f"{pre}.mlp.fc2.b"] = _zeros((d,))
    p["ln_out.g"] = _ones((d,))
    p["ln_out.b"] = _zeros((d,))
    p["head.w"] = trunc_normal(rng.split("head"), (d, cfg.embed_dim))
    p["head.b"] = _zeros((cfg.embed_dim,))
    return p


def _one_hot(rows, width, dtype) -> np.ndarray:
    out = np.zeros((len(rows), width), dtype=dtype)
    out[np.arange(len(rows)), rows] = 1.0
    return out


def patch_embed(clip: np.ndarray, params: dict, cfg: ModelConfig,
                visible=None) -> Tensor:
    """Project patches and add position embeddings; prepend the cls token.

    `visible` restricts the grid to those spatial indices (masked
    pretraining); None keeps all of them. Output is (1 + F*V, d_model)
    with patch tokens ordered frame-major.
    """
    clip = np.asarray(clip, dtype=np.float32)
    want = (cfg.frames, cfg.image_size, cfg.image_size, 3)
    if clip.shape != want:
        raise ConfigError(f"clip shape {clip.shape} does not match {want}")
    s = cfg.spatial_patches
    if visible is None:
        visible = np.arange(s)
    visible = np.asarray(visible, dtype=np.int64)
    if visible.size and not (visible.min() >= 0 and visible.max() < s):
        raise ConfigError(f"visible indices out of range for S={s}")
    f, v = cfg.frames, visible.size
    patches = frames_to_patches(clip, cfg.patch_size).reshape(f, s, -1)
    sel = np.ascontiguousarray(patches[:, visible, :]).reshape(
        f * v, cfg.patch_values)
    x = T.add(T.matmul(Tensor(sel), params["patch.proj.w"]),
              params["patch.proj.b"])
    dtype = params["patch.proj.w"].dtype
    spatial_pick = Tensor(_one_hot(np.tile(visible, f), s, dtype))
    temporal_pick = Tensor(_one_hot(np.repeat(np.arange(f), v), f, dtype))
    pos = T.add(T.matmul(spatial_pick, params["pos.spatial"]),
                T.matmul(temporal_pick, params["pos.temporal"]))
    x = T.add(x, pos)
    return T.concat([params["cls"], x], axis=0)


def attention(x: Tensor, params: dict, prefix: str, n_batch: int, seq: int,
              heads: int) -> Tensor:
    """Multi-head self-attention over `n_batch` packed sequences.

    `x` is (n_batch*seq, d) with rows grouped by sequence; the output
    has the same layout.
    """
    d = x.shape[1]
    dh = d // heads
    q = T.add(T.matmul(x, params[f"{prefix}.q.w"]), params[f"{prefix}.q.b"])
    k = T.add(T.matmul(x, params[f"{prefix}.k.w"]), params[f"{prefix}.k.b"])
    v = T.add(T.matmul(x, params[f"{prefix}.v.w"]), params[f"{prefix}.v.b"])

    def split_heads(t):
        t = T.reshape(t, (n_batch, seq, heads, dh))
        t = T.transpose(t, (0, 2, 1, 3))
        return T.reshape(t, (n_batch * heads, seq, dh))

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    logits = T.scale(T.bmm(qh, T.transpose(kh, (0, 2, 1))),
                     1.0 / math.sqrt(dh))
    weights = T.softmax(logits, axis=2)
    ctx = T.bmm(weights, vh)
    ctx = T.reshape(ctx, (n_batch, heads, seq, dh))
    ctx = T.transpose(ctx, (0, 2, 1, 3))
    ctx = T.reshape(ctx, (n_batch * seq, d))
    return T.add(T.matmul(ctx, params[f"{prefix}.o.w"]),
                 params[f"{prefix}.o.b"])


def encode_block(tokens: Tensor, params: dict, cfg: ModelConfig, idx: int,
                 n_space: int | None = None) -> Tensor:
    """One divided space-time block; `n_space` is patches per frame."""
    f = cfg.frames
    d = cfg.d_model
    v = cfg.spatial_patches if n_space is None else n_space
    pre = f"blk{idx}"
    cls = T.slice_axis(tokens, 0, 0, 1)
    patches = T.slice_axis(tokens, 0, 1, 1 + f * v)

    # Temporal attention: one sequence per visible spatial index, across
    # frames. The cls token has no frame index and sits this pass out.
    if v > 0:
        h = T.layer_norm(tokens, params[f"{pre}.ln_time.g"],
                         params[f"{pre}.ln_time.b"])
        hp = T.slice_axis(h, 0, 1, 1 + f * v)
        seqs = T.transpose(T.reshape(hp, (f, v, d)), (1, 0, 2))
        upd = attention(T.reshape(seqs, (v * f, d)), params, f"{pre}.time",
                        v, f, cfg.heads)
        upd = T.transpose(T.reshape(upd, (v, f, d)), (1, 0, 2))
        patches = T.add(patches, T.reshape(upd, (f * v, d)))
        tokens = T.concat([cls, patches], axis=0)

    # Spatial attention: per frame over that frame's patches plus a copy
    # of the cls token; the F cls outputs are averaged into one update.
    h = T.layer_norm(tokens, params[f"{pre}.ln_space.g"],
                     params[f"{pre}.ln_space.b"])
    hc = T.reshape(T.slice_axis(h, 0, 0, 1), (1, 1, d))
    seq = T.concat([hc] * f, axis=0)
    if v > 0:
        hp = T.reshape(T.slice_axis(h, 0, 1, 1 + f * v), (f, v, d))
        seq = T.concat([seq, hp], axis=1)
    out = attention(T.reshape(seq, (f * (1 + v), d)), params, f"{pre}.space",
                    f, 1 + v, cfg.heads)
    out = T.reshape(out, (f, 1 + v, d))
    cls_upd = T.reshape(T.mean(T.reshape(T.slice_axis(out, 1, 0, 1), (f, d)),
                               axis=0), (1, d))
    cls = T.add(cls, cls_upd)
    if v > 0:
        patch_upd = T.reshape(T.slice_axis(out, 1, 1, 1 + v), (f * v, d))
        patches = T.add(patches, patch_upd)
    tokens = T.concat([cls, patches], axis=0)

    h = T.layer_norm(tokens, params[f"{pre}.ln_mlp.g"],
                     params[f"{pre}.ln_mlp.b"])
    u = T.gelu(T.add(T.matmul(h, params[f"{pre}.mlp.fc1.w"]),
                     params[f"{pre}.mlp.fc1.b"]))
    u = T.add(T.matmul(u, params[f"{pre}.mlp.fc2.w"]),
              params[f"{pre}.mlp.fc2.b"])
    return T.add(tokens, u)


def encode_tokens(tokens: Tensor, params: dict, cfg: ModelConfig,
                  n_space: int | None = None) -> Tensor:
    """Run all blocks, checking activations stay finite."""
    for i in range(cfg.depth):
        tokens = encode_block(tokens, params, cfg, i, n_space)
        if not np.all(np.isfinite(tokens.data)):
            raise NumericError(f"non-finite activations after block {i}")
    return tokens


def encode_clip(clip, params: dict, cfg: ModelConfig) -> Tensor:
    """Map one clip to a unit-norm (embed_dim,) embedding."""
    tokens = encode_tokens(patch_embed(clip, params, cfg), params, cfg)
    cls = T.slice_axis(tokens, 0, 0, 1)
    h = T.layer_norm(cls, params["ln_out.g"], params["ln_out.b"])
    y = T.add(T.matmul(h, params["head.w"]), params["head.b"])
    y = T.l2_normalize(y, axis=-1)
    if not np.all(np.isfinite(y.data)):
        raise NumericError("non-finite clip embedding after head")
    return T.reshape(y, (cfg.embed_dim,))


def encode_clips(clips, params: dict, cfg: ModelConfig) -> Tensor:
    """Encode a sequence of clips into a (len(clips), embed_dim) matrix."""
    rows = [T.reshape(encode_clip(c, params, cfg), (1, cfg.embed_dim))
            for c in clips]
    return T.concat(rows, axis=0) if len(rows) > 1 else rows[0]
