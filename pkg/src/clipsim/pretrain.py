"""Stage-1 pretraining: predict the next 8 frames from a masked clip.

The same spatial patch indices are masked in every frame of the input
clip (tube masking, default ratio 0.9); the encoder sees only the
visible tubes. A 4-layer joint-attention decoder then receives the full
past grid, with masked slots holding a shared learned mask token plus
position embeddings, together with one query slot per future patch
(spatial table shared with the encoder, its own future temporal table),
and reconstructs each future patch's raw pixels. The loss is plain MSE
against the future frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .encoder import (ModelConfig, attention, encode_tokens, frames_to_patches,
                      init_encoder_params, patch_embed, patches_to_frames,
                      trunc_normal)
from .errors import ConfigError, ContractError, TrainingError
from .optim import OptimizerState, adamw_step, cosine_lr
from .rng import Rng
from .tensor import Tensor

__all__ = [
    "DECODER_DEPTH", "TubeMask", "tube_mask", "DecoderConfig",
    "init_decoder_params", "predict_future_patches", "predict_future",
    "predmae_loss", "PretrainConfig", "pretrain_run",
]

DECODER_DEPTH = 4


@dataclass(frozen=True)
class TubeMask:
    """Masked spatial indices, shared by every frame of the clip."""

    total: int
    ratio: float
    masked: tuple

    @property
    def visible(self) -> tuple:
        hidden = set(self.masked)
        return tuple(s for s in range(self.total) if s not in hidden)


def tube_mask(total: int, ratio: float, rng: Rng) -> TubeMask:
    """Uniform random mask of round(ratio*total) spatial indices.

    round() is Python's round-half-to-even, so e.g. S=16, ratio 0.9
    masks round(14.4) = 14 tubes.
    """
    if total < 1:
        raise ContractError(f"need at least one spatial index, got {total}")
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio {ratio} outside [0, 1]")
    count = round(ratio * total)
    masked = tuple(sorted(rng.choice(total, size=count).tolist())) \
        if count else ()
    return TubeMask(total=total, ratio=ratio, masked=masked)


@dataclass(frozen=True)
class DecoderConfig:
    """Decoder hyperparameters; depth is architecturally fixed at 4."""

    heads: int = 4
    depth: int = DECODER_DEPTH

    def __post_init__(self):
        if self.depth != DECODER_DEPTH:
            raise ConfigError(f"decoder depth is fixed at {DECODER_DEPTH}, "
                              f"got {self.depth}")
        if self.heads < 1:
            raise ConfigError("decoder heads must be positive")


def init_decoder_params(cfg: ModelConfig, dcfg: DecoderConfig,
                        rng: Rng) -> dict:
    """Decoder weights; width equals the encoder's d_model."""
    d = cfg.d_model
    if d % dcfg.heads != 0:
        raise ConfigError(f"d_model {d} not divisible by decoder heads "
                          f"{dcfg.heads}")
    p = {}
    p["dec.mask"] = trunc_normal(rng.split("mask"), (1, d))
    p["dec.pos.future"] = trunc_normal(rng.split("pos.f"), (cfg.frames, d))
    for i in range(dcfg.depth):
        r = rng.split(f"blk{i}")
        pre = f"dec.blk{i}"
        for ln in ("ln_attn", "ln_mlp"):
            p[f"{pre}.{ln}.g"] = Tensor(np.ones(d, np.float32))
            p[f"{pre}.{ln}.b"] = Tensor(np.zeros(d, np.float32))
        for piece in ("q", "k", "v", "o"):
            p[f"{pre}.attn.{piece}.w"] = trunc_normal(r.split(piece), (d, d))
            p[f"{pre}.attn.{piece}.b"] = Tensor(np.zeros(d, np.float32))
        p[f"{pre}.mlp.fc1.w"] = trunc_normal(r.split("fc1"), (d, 4 * d))
        p[f"{pre}.mlp.fc1.b"] = Tensor(np.zeros(4 * d, np.float32))
        p[f"{pre}.mlp.fc2.w"] = trunc_normal(r.split("fc2"), (4 * d, d))
        p[f"{pre}.mlp.fc2.b"] = Tensor(np.zeros(d, np.float32))
    p["dec.ln_out.g"] = Tensor(np.ones(d, np.float32))
    p["dec.ln_out.b"] = Tensor(np.zeros(d, np.float32))
    p["dec.head.w"] = trunc_normal(rng.split("head"), (d, cfg.patch_values))
    p["dec.head.b"] = Tensor(np.zeros(cfg.patch_values, np.float32))
    return p


def _decoder_block(tokens: Tensor, params: dict, idx: int,
                   heads: int) -> Tensor:
    pre = f"dec.blk{idx}"
    n = tokens.shape[0]
    h = T.layer_norm(tokens, params[f"{pre}.ln_attn.g"],
                     params[f"{pre}.ln_attn.b"])
    tokens = T.add(tokens, attention(h, params, f"{pre}.attn", 1, n, heads))
    h = T.layer_norm(tokens, params[f"{pre}.ln_mlp.g"],
                     params[f"{pre}.ln_mlp.b"])
    u = T.gelu(T.add(T.matmul(h, params[f"{pre}.mlp.fc1.w"]),
                     params[f"{pre}.mlp.fc1.b"]))
    u = T.add(T.matmul(u, params[f"{pre}.mlp.fc2.w"]),
              params[f"{pre}.mlp.fc2.b"])
    return T.add(tokens, u)


def _one_hot(rows: np.ndarray, width: int, dtype) -> np.ndarray:
    out = np.zeros((rows.size, width), dtype=dtype)
    out[np.arange(rows.size), rows] = 1.0
    return out


def predict_future_patches(past_clip, mask: TubeMask, params: dict,
                           cfg: ModelConfig, dcfg: DecoderConfig) -> Tensor:
    """Differentiable core: (F*S, P*P*3) predicted future patches.

    `params` holds encoder and decoder weights together (decoder keys
    carry the ``dec.`` prefix).
    """
    if "dec.mask" not in params:
        raise ConfigError("parameter dict lacks decoder weights")
    f, s = cfg.frames, cfg.spatial_patches
    if mask.total != s:
        raise ConfigError(f"mask covers {mask.total} indices, config has {s}")
    visible = np.asarray(mask.visible, dtype=np.int64)
    v = visible.size

    tokens = patch_embed(past_clip, params, cfg, visible=visible)
    tokens = encode_tokens(tokens, params, cfg, n_space=v)
    dtype = tokens.dtype

    # Past grid: visible slots take their encoder output token; masked
    # slots take the shared mask token plus position embeddings.
    grid_rows = f * s
    pick_visible = np.zeros((grid_rows, 1 + f * v), dtype=dtype)
    vis_col = {sp: j for j, sp in enumerate(visible.tolist())}
    masked_rows = []
    for t in range(f):
        for sp in range(s):
            row = t * s + sp
            if sp in vis_col:
                pick_visible[row, 1 + t * v + vis_col[sp]] = 1.0
            else:
                masked_rows.append(row)
    masked_rows = np.asarray(masked_rows, dtype=np.int64)
    past = T.matmul(Tensor(pick_visible), tokens)
    if masked_rows.size:
        is_masked = np.zeros((grid_rows, 1), dtype=dtype)
        is_masked[masked_rows] = 1.0
        sp_pick = np.zeros((grid_rows, s), dtype=dtype)
        sp_pick[masked_rows, masked_rows % s] = 1.0
        t_pick = np.zeros((grid_rows, f), dtype=dtype)
        t_pick[masked_rows, masked_rows // s] = 1.0
        fill = T.add(T.matmul(Tensor(is_masked), params["dec.mask"]),
                     T.add(T.matmul(Tensor(sp_pick), params["pos.spatial"]),
                           T.matmul(Tensor(t_pick), params["pos.temporal"])))
        past = T.add(past, fill)

    # Future queries: spatial position plus a learned future-frame
    # embedding, one slot per (t, s).
    all_rows = np.arange(grid_rows)
    sp_all = _one_hot(all_rows % s, s, dtype)
    t_all = _one_hot(all_rows // s, f, dtype)
    future = T.add(T.matmul(Tensor(sp_all), params["pos.spatial"]),
                   T.matmul(Tensor(t_all), params["dec.pos.future"]))

    seq = T.concat([past, future], axis=0)
    for i in range(dcfg.depth):
        seq = _decoder_block(seq, params, i, dcfg.heads)
    out = T.slice_axis(seq, 0, grid_rows, 2 * grid_rows)
    out = T.layer_norm(out, params["dec.ln_out.g"], params["dec.ln_out.b"])
    return T.add(T.matmul(out, params["dec.head.w"]), params["dec.head.b"])


def predict_future(past_clip, mask: TubeMask, params: dict, cfg: ModelConfig,
                   dcfg: DecoderConfig) -> np.ndarray:
    """Predicted future frames assembled to (F, H, W, 3)."""
    patches = predict_future_patches(past_clip, mask, params, cfg, dcfg)
    return patches_to_frames(patches.data, cfg.frames, cfg.image_size,
                             cfg.patch_size)


def predmae_loss(pred, gt) -> Tensor:
    """Mean squared error over all elements (scalar Tensor)."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    return T.mse(pred, gt)


@dataclass
class PretrainConfig:
    steps: int = 200
    batch: int = 4
    mask_ratio: float = 0.9
    base_lr: float = 5e-4
    lr_scale: str = "batch"
    weight_decay: float = 0.0
    decoder_heads: int = 4
    seed: int = 42

    def __post_init__(self):
        if self.lr_scale not in ("batch", "none"):
            raise ConfigError(f"lr_scale must be 'batch' or 'none', "
                              f"got '{self.lr_scale}'")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")


def effective_lr(base_lr: float, batch: int, rule: str) -> float:
    """The paper's linear batch rule, or the raw value for toy runs."""
    return base_lr * batch / 256.0 if rule == "batch" else base_lr


def sample_window_pair(video: np.ndarray, frames: int, rng: Rng):
    """Random contiguous (past, future) windows of `frames` frames each."""
    total = video.shape[0]
    if total < 2 * frames:
        raise ContractError(f"video of {total} frames cannot supply "
                            f"{2 * frames} contiguous frames")
    start = int(rng.integers(0, total - 2 * frames + 1))
    past = video[start:start + frames]
    future = video[start + frames:start + 2 * frames]
    return past, future


def pretrain_run(videos, cfg: ModelConfig, pcfg: PretrainConfig,
                 checkpoint_path=None, metrics_path=None):
    """Full pretraining loop; returns (params, losses).

    `videos` is a list of (T, H, W, 3) arrays, each at least 2F frames
    long. One tube mask is drawn per step and shared across the batch.
    """
    videos = list(videos)
    if not videos:
        raise ContractError("no videos to pretrain on")
    rng = Rng(pcfg.seed)
    dcfg = DecoderConfig(heads=pcfg.decoder_heads)
    params = init_encoder_params(cfg, rng.split("init.enc"))
    params.update(init_decoder_params(cfg, dcfg, rng.split("init.dec")))
    state = OptimizerState(weight_decay=pcfg.weight_decay)
    lr0 = effective_lr(pcfg.base_lr, pcfg.batch, pcfg.lr_scale)
    losses = []
    for step in range(pcfg.steps):
        srng = rng.split(f"step{step}")
        mask = tube_mask(cfg.spatial_patches, pcfg.mask_ratio,
                         srng.split("mask"))
        pick = srng.split("videos")
        sample = srng.split("windows")
        with T.Tape() as tape:
            total = None
            for b in range(pcfg.batch):
                video = videos[int(pick.integers(0, len(videos)))]
                past, future = sample_window_pair(video, cfg.frames, sample)
                pred = predict_future_patches(past, mask, params, cfg, dcfg)
                gt = frames_to_patches(future.astype(np.float32),
                                       cfg.patch_size)
                item = predmae_loss(pred, gt)
                total = item if total is None else T.add(total, item)
            loss = T.scale(total, 1.0 / pcfg.batch)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite pretraining loss at step {step}")
        grads = tape.backward(loss)
        by_name = {name: grads[tape.node_id(t)] for name, t in params.items()
                   if tape.node_id(t) is not None}
        lr = cosine_lr(step, pcfg.steps, lr0)
        params = adamw_step(params, by_name, state, lr)
        losses.append(value)
    if metrics_path is not None:
        lines = ["step,loss"] + [f"{i},{v:.8f}" for i, v in enumerate(losses)]
        with open(metrics_path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return params, losses
