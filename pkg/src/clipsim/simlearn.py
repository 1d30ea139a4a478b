"""Stage-2 similarity learning.

Positives come from overlapping windows of the same video, optionally
with a spliced-in cut from elsewhere in that video (shot mixing), plus
a horizontally flipped copy of each positive. Negatives come from the
rest of the batch and a FIFO memory bank of past anchor embeddings.
The objective combines a multi-similarity loss over mined pairs with a
hinge that pushes the flipped positive further from the anchor than
the unflipped one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .encoder import ModelConfig, encode_clips, init_encoder_params
from .errors import (ConfigError, ContractError, SamplingError, ShapeError,
                     TrainingError)
from .optim import OptimizerState, adamw_step, cosine_lr
from .pretrain import effective_lr
from .rng import Rng
from .tensor import Tensor

__all__ = [
    "PairSpec", "shotmix_sample", "sample_pair_spec", "apply_spec", "hflip",
    "mine_pairs", "ms_loss", "fcs_loss", "combined_loss", "LossConfig",
    "MemoryBank", "TrainConfig", "train_step", "train_run",
]


@dataclass(frozen=True)
class PairSpec:
    """Placement of an anchor/positive window pair within one video."""

    video_len: int
    length: int
    anchor_start: int
    positive_start: int
    overlap_ratio: float
    cut_start: int = 0
    cut_len: int = 0
    cut_at: str = "end"


def shotmix_sample(video_len: int, length: int, rng: Rng) -> PairSpec:
    """Draw an overlapping window pair plus an optional splice cut.

    The windows share ceil(r*length) frames for r uniform in (0.7, 1).
    The cut is up to floor((1-r)*length) frames taken from anywhere in
    the video (overlapping the anchor is allowed) and replaces one end
    of the positive window. Videos shorter than 2*length degrade to
    positive == anchor with no cut.
    """
    if length < 1:
        raise ContractError(f"window length must be positive, got {length}")
    if video_len < length:
        raise SamplingError(f"video of {video_len} frames cannot supply a "
                            f"{length}-frame window")
    if video_len < 2 * length:
        start = int(rng.integers(0, video_len - length + 1))
        return PairSpec(video_len=video_len, length=length,
                        anchor_start=start, positive_start=start,
                        overlap_ratio=1.0)
    r = float(rng.uniform(0.7, 1.0))
    overlap = math.ceil(r * length)
    delta = length - overlap
    lead = int(rng.integers(0, video_len - length - delta + 1))
    if rng.coin():
        s_a, s_p = lead, lead + delta
    else:
        s_a, s_p = lead + delta, lead
    cut_len = int(rng.integers(0, math.floor((1.0 - r) * length) + 1))
    cut_start = int(rng.integers(0, video_len - cut_len + 1))
    cut_at = "begin" if rng.coin() else "end"
    return PairSpec(video_len=video_len, length=length, anchor_start=s_a,
                    positive_start=s_p, overlap_ratio=r,
                    cut_start=cut_start, cut_len=cut_len, cut_at=cut_at)


def sample_pair_spec(video_len: int, length: int, rng: Rng,
                     mix_prob: float = 0.5) -> PairSpec:
    """Training sampler: shot mixing with probability `mix_prob`, else
    the same overlapping windows with the cut dropped."""
    use_mix = rng.split("mix").coin(mix_prob)
    spec = shotmix_sample(video_len, length, rng.split("place"))
    if not use_mix and spec.cut_len:
        spec = PairSpec(video_len=spec.video_len, length=spec.length,
                        anchor_start=spec.anchor_start,
                        positive_start=spec.positive_start,
                        overlap_ratio=spec.overlap_ratio)
    return spec


def apply_spec(video: np.ndarray, spec: PairSpec):
    """Materialize (anchor, positive) frame arrays for a sampled spec."""
    video = np.asarray(video)
    n, f = video.shape[0], spec.length
    for name, start in (("anchor", spec.anchor_start),
                        ("positive", spec.positive_start)):
        if not 0 <= start <= n - f:
            raise ContractError(f"{name} window [{start}, {start + f}) "
                                f"outside video of {n} frames")
    if spec.cut_len < 0 or spec.cut_start < 0 \
            or spec.cut_start + spec.cut_len > n:
        raise ContractError(f"cut window [{spec.cut_start}, "
                            f"{spec.cut_start + spec.cut_len}) outside "
                            f"video of {n} frames")
    if spec.cut_len > f:
        raise ContractError(f"cut of {spec.cut_len} frames exceeds the "
                            f"{f}-frame window")
    if spec.cut_at not in ("begin", "end"):
        raise ContractError(f"cut_at must be 'begin' or 'end', "
                            f"got '{spec.cut_at}'")
    anchor = video[spec.anchor_start:spec.anchor_start + f].copy()
    positive = video[spec.positive_start:spec.positive_start + f].copy()
    if spec.cut_len:
        cut = video[spec.cut_start:spec.cut_start + spec.cut_len]
        if spec.cut_at == "end":
            positive[f - spec.cut_len:] = cut
        else:
            positive[:spec.cut_len] = cut
    return anchor, positive


def hflip(clip: np.ndarray) -> np.ndarray:
    """Mirror every frame along the width axis."""
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ContractError(f"expected (F, H, W, C) frames, "
                            f"got shape {clip.shape}")
    return np.ascontiguousarray(clip[:, :, ::-1, :])


def mine_pairs(sims: np.ndarray, pos_flags: np.ndarray, eps: float,
               valid: np.ndarray | None = None):
    """Hard-pair selection for one anchor's similarity row.

    Keeps negatives scoring above min(positive sims) + eps and
    positives scoring below max(negative sims) - eps. Returns (P_i,
    N_i) index arrays; both are empty when either candidate side is
    empty. `valid` masks out candidates entirely (e.g. bank entries
    from the anchor's own video).
    """
    sims = np.asarray(sims, dtype=np.float64)
    pos_flags = np.asarray(pos_flags, dtype=bool)
    if sims.ndim != 1 or sims.shape != pos_flags.shape:
        raise ShapeError(f"similarity row {sims.shape} and flags "
                         f"{pos_flags.shape} must be equal 1-d shapes")
    keep = np.ones(sims.shape[0], dtype=bool) if valid is None \
        else np.asarray(valid, dtype=bool)
    if keep.shape != sims.shape:
        raise ShapeError(f"valid mask {keep.shape} does not match "
                         f"row {sims.shape}")
    empty = np.empty(0, dtype=np.int64)
    pos_idx = np.flatnonzero(pos_flags & keep)
    neg_idx = np.flatnonzero(~pos_flags & keep)
    if pos_idx.size == 0 or neg_idx.size == 0:
        return empty, empty
    min_pos = sims[pos_idx].min()
    max_neg = sims[neg_idx].max()
    mined_n = neg_idx[sims[neg_idx] > min_pos + eps]
    mined_p = pos_idx[sims[pos_idx] < max_neg - eps]
    return mined_p, mined_n


def _log1p_exp_sum(z: np.ndarray):
    """(log(1 + sum(exp(z))), per-term weights exp(z_k)/(1+sum))."""
    m = max(0.0, float(z.max()))
    e = np.exp(z - m)
    denom = math.exp(-m) + e.sum()
    return m + math.log(denom), e / denom


def ms_loss(sims: np.ndarray, mined, alpha: float, beta: float, lam: float,
            count: int):
    """Multi-similarity loss over mined pairs.

    `sims` is the (anchors, candidates) similarity matrix; `mined` is
    one (P_i, N_i) index pair per anchor. Returns (value, gradient
    w.r.t. sims), averaging over `count` anchors.
    """
    if alpha <= 0 or beta <= 0:
        raise ConfigError(f"alpha and beta must be positive, "
                          f"got {alpha} and {beta}")
    if count < 1:
        raise ConfigError(f"anchor count must be positive, got {count}")
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2:
        raise ShapeError(f"expected a 2-d similarity matrix, "
                         f"got shape {sims.shape}")
    if len(mined) != sims.shape[0]:
        raise ShapeError(f"{len(mined)} mined sets for {sims.shape[0]} "
                         f"anchors")
    total = 0.0
    grad = np.zeros_like(sims)
    for i, (pos, neg) in enumerate(mined):
        pos = np.asarray(pos, dtype=np.int64)
        neg = np.asarray(neg, dtype=np.int64)
        if pos.size:
            value, w = _log1p_exp_sum(-alpha * (sims[i, pos] - lam))
            total += value / alpha
            grad[i, pos] -= w / count
        if neg.size:
            value, w = _log1p_exp_sum(beta * (sims[i, neg] - lam))
            total += value / beta
            grad[i, neg] += w / count
    return total / count, grad


def fcs_loss(x_a: np.ndarray, x_p: np.ndarray, x_pf: np.ndarray,
             gamma: float):
    """Hinge demanding the flipped positive sit further from the anchor.

    Distances are cosine: D(u, v) = 1 - u.v for unit-norm rows, so the
    per-row margin is (a.pf - a.p + gamma). Returns (value, (grad_a,
    grad_p, grad_pf)); the subgradient at the hinge boundary is 0.
    """
    x_a = np.asarray(x_a, dtype=np.float64)
    x_p = np.asarray(x_p, dtype=np.float64)
    x_pf = np.asarray(x_pf, dtype=np.float64)
    if not (x_a.shape == x_p.shape == x_pf.shape) or x_a.ndim != 2:
        raise ShapeError(f"embedding batches must share one 2-d shape, got "
                         f"{x_a.shape}, {x_p.shape}, {x_pf.shape}")
    n = x_a.shape[0]
    if n < 1:
        raise ShapeError("empty embedding batch")
    margins = (x_a * x_pf).sum(axis=1) - (x_a * x_p).sum(axis=1) + gamma
    active = (margins > 0.0).astype(np.float64)[:, None]
    value = float(np.maximum(margins, 0.0).sum() / n)
    grad_a = active * (x_pf - x_p) / n
    grad_p = -active * x_a / n
    grad_pf = active * x_a / n
    return value, (grad_a, grad_p, grad_pf)


def combined_loss(ms: float, fcs: float, w1: float = 1.0,
                  w2: float = 0.01) -> float:
    """Weighted sum of the two objectives."""
    if w1 < 0 or w2 < 0:
        raise ConfigError(f"loss weights must be non-negative, "
                          f"got {w1} and {w2}")
    return w1 * ms + w2 * fcs


@dataclass(frozen=True)
class LossConfig:
    """Objective hyperparameters; `anchors` of None means batch size."""

    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 1.0
    eps: float = 0.1
    gamma: float = 0.1
    w1: float = 1.0
    w2: float = 0.01
    anchors: int | None = None

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.anchors is not None and self.anchors < 1:
            raise ConfigError("anchors must be positive when set")


def _ms_loss_op(sims: Tensor, mined, lcfg: LossConfig, count: int) -> Tensor:
    """Tape-recorded multi-similarity loss with a fixed mined set."""
    def compute(arr):
        return ms_loss(arr, mined, lcfg.alpha, lcfg.beta, lcfg.lam, count)

    value, grad = compute(sims.data)
    out_arr = np.asarray(value, dtype=sims.dtype)
    out = Tensor._wrap(out_arr)
    tape = T.active_tape()
    if tape is not None:
        def backward(g):
            full = np.asarray(g, np.float64) * grad
            return [full.astype(sims.dtype, copy=False)]

        def forward(arr):
            return np.asarray(compute(arr)[0], dtype=sims.dtype)

        tape.record("ms_loss", [sims], out, backward, forward)
    return out


def _fcs_loss_op(x_a: Tensor, x_p: Tensor, x_pf: Tensor,
                 gamma: float) -> Tensor:
    """Tape-recorded flip hinge loss."""
    value, (ga, gp, gpf) = fcs_loss(x_a.data, x_p.data, x_pf.data, gamma)
    out_arr = np.asarray(value, dtype=x_a.dtype)
    out = Tensor._wrap(out_arr)
    tape = T.active_tape()
    if tape is not None:
        def backward(g):
            up = np.asarray(g, np.float64)
            return [(up * part).astype(x_a.dtype, copy=False)
                    for part in (ga, gp, gpf)]

        def forward(a, p, pf):
            return np.asarray(fcs_loss(a, p, pf, gamma)[0], dtype=x_a.dtype)

        tape.record("fcs_loss", [x_a, x_p, x_pf], out, backward, forward)
    return out


class MemoryBank:
    """FIFO ring of past anchor embeddings tagged with their video id."""

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ContractError(f"bank capacity must be positive, "
                                f"got {capacity}")
        self._capacity = capacity
        self._entries: list[tuple[np.ndarray, str]] = []

    @property
    def capacity(self) -> int:
        return self._capacity

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, embedding: np.ndarray, video_id: str) -> None:
        vec = np.array(embedding, dtype=np.float32)
        if vec.ndim != 1:
            raise ContractError(f"bank entries are 1-d vectors, "
                                f"got shape {vec.shape}")
        vec.flags.writeable = False
        self._entries.append((vec, video_id))
        if len(self._entries) > self._capacity:
            del self._entries[0]

    def snapshot(self):
        """(matrix of entries oldest-first, list of video ids)."""
        if not self._entries:
            return (np.empty((0, 0), dtype=np.float32), [])
        mat = np.stack([vec for vec, _ in self._entries])
        return mat, [vid for _, vid in self._entries]


@dataclass
class TrainConfig:
    steps: int = 300
    batch: int = 4
    base_lr: float = 1e-3
    lr_scale: str = "none"
    weight_decay: float = 0.0
    bank_capacity: int = 4096
    mix_prob: float = 0.5
    seed: int = 42
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr_scale not in ("batch", "none"):
            raise ConfigError(f"lr_scale must be 'batch' or 'none', "
                              f"got '{self.lr_scale}'")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if not 0.0 <= self.mix_prob <= 1.0:
            raise ConfigError(f"mix_prob {self.mix_prob} outside [0, 1]")


def train_step(batch, params: dict, bank: MemoryBank, state: OptimizerState,
               cfg: ModelConfig, lcfg: LossConfig, rng: Rng, lr: float,
               mix_prob: float = 0.5):
    """One optimizer step over `batch` = [(video_id, frames), ...].

    Returns (new params, metrics dict). Anchor embeddings are pushed
    into the bank gradient-detached; bank entries from an anchor's own
    video are excluded from its candidate row.
    """
    n = len(batch)
    if n < 1:
        raise ContractError("empty training batch")
    anchors, positives, flipped = [], [], []
    for i, (vid, video) in enumerate(batch):
        spec = sample_pair_spec(video.shape[0], cfg.frames,
                                rng.split(f"pair{i}"), mix_prob)
        a, p = apply_spec(video, spec)
        anchors.append(a)
        positives.append(p)
        flipped.append(hflip(p))
    bank_mat, bank_vids = bank.snapshot()
    with T.Tape() as tape:
        x_a = encode_clips(anchors, params, cfg)
        x_p = encode_clips(positives, params, cfg)
        x_pf = encode_clips(flipped, params, cfg)
        cand = T.concat([x_p, x_pf], axis=0)
        if bank_mat.size:
            cand = T.concat([cand, Tensor(bank_mat)], axis=0)
        sims = T.matmul(x_a, T.transpose(cand, (1, 0)))

        n_cand = sims.shape[1]
        pos_flags = np.zeros(n_cand, dtype=bool)
        mined = []
        for i, (vid, _) in enumerate(batch):
            flags = pos_flags.copy()
            flags[i] = flags[n + i] = True
            valid = np.ones(n_cand, dtype=bool)
            for j, bank_vid in enumerate(bank_vids):
                if bank_vid == vid:
                    valid[2 * n + j] = False
            mined.append(mine_pairs(sims.data[i], flags, lcfg.eps,
                                    valid=valid))
        count = lcfg.anchors if lcfg.anchors is not None else n
        ms = _ms_loss_op(sims, mined, lcfg, count)
        fcs = _fcs_loss_op(x_a, x_p, x_pf, lcfg.gamma)
        total = T.add(T.scale(ms, lcfg.w1), T.scale(fcs, lcfg.w2))
    if not np.isfinite(total.item()):
        raise TrainingError("non-finite training loss")
    grads = tape.backward(total)
    by_name = {name: grads[tape.node_id(t)] for name, t in params.items()
               if tape.node_id(t) is not None}
    params = adamw_step(params, by_name, state, lr)
    for i, (vid, _) in enumerate(batch):
        bank.push(x_a.data[i], vid)
    metrics = {"ms_loss": ms.item(), "fcs_loss": fcs.item(),
               "total": total.item(), "lr": lr, "bank_size": len(bank)}
    return params, metrics


def train_run(videos: dict, cfg: ModelConfig, tcfg: TrainConfig,
              init_params: dict | None = None, checkpoint_path=None,
              metrics_path=None):
    """Full training loop over a {video_id: frames} corpus.

    Returns (params, metrics list). `init_params` (e.g. a pretrained
    checkpoint) defaults to a fresh seeded initialization.
    """
    if not videos:
        raise ContractError("no videos to train on")
    ids = sorted(videos)
    if tcfg.batch > len(ids):
        raise SamplingError(f"batch of {tcfg.batch} exceeds corpus of "
                            f"{len(ids)} videos")
    rng = Rng(tcfg.seed)
    params = dict(init_params) if init_params is not None \
        else init_encoder_params(cfg, rng.split("init"))
    bank = MemoryBank(tcfg.bank_capacity)
    state = OptimizerState(weight_decay=tcfg.weight_decay)
    lr0 = effective_lr(tcfg.base_lr, tcfg.batch, tcfg.lr_scale)
    history = []
    for step in range(tcfg.steps):
        srng = rng.split(f"step{step}")
        pick = srng.split("videos").choice(len(ids), size=tcfg.batch)
        batch = [(ids[int(j)], videos[ids[int(j)]]) for j in pick]
        lr = cosine_lr(step, tcfg.steps, lr0)
        try:
            params, metrics = train_step(batch, params, bank, state, cfg,
                                         tcfg.loss, srng.split("samples"),
                                         lr, tcfg.mix_prob)
        except TrainingError as exc:
            raise TrainingError(f"{exc} at step {step}") from exc
        metrics["step"] = step
        history.append(metrics)
    if metrics_path is not None:
        lines = ["step,ms_loss,fcs_loss,total,lr,bank_size"]
        for m in history:
            lines.append(f"{m['step']},{m['ms_loss']:.8f},"
                         f"{m['fcs_loss']:.8f},{m['total']:.8f},"
                         f"{m['lr']:.8g},{m['bank_size']}")
        with open(metrics_path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return params, history
