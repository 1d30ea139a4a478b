"""Command-line entry point.

One verb per pipeline stage: synth (benchmark generation), pretrain
(future-frame masked pretraining), train (similarity learning, with an
--ablation mode comparing the sampling/loss/matching features),
extract (videos -> feature store), query (ranked list for one query),
eval (mAP report), selfcheck (built-in verification suites).

Exit codes: 0 success, 1 usage or configuration error, 2 data/format
error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys

from . import selfcheck as selfcheck_mod
from .checkpoint import load_checkpoint
from .clipio import read_video
from .config import load_config
from .encoder import ModelConfig, encode_clips, init_encoder_params
from .errors import (ConfigError, ContractError, FormatError, IntegrityError,
                     MetricError, NumericError, SamplingError, ShapeError,
                     TrainingError, UnknownIdError, UsageError)
from .pretrain import pretrain_run
from .retrieval import (CorpusIndex, evaluate, load_annotations, rank_query,
                        read_store, video_to_clips, write_store)
from .rng import Rng
from .simlearn import LossConfig, TrainConfig, train_run
from .synth import generate, load_manifest

__all__ = ["main", "dispatch", "default_params", "extract_index",
           "run_ablation", "ABLATION_ROWS"]

_CHAMFER_K = 1_000_000_000  # top-k cap >= any clip count


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="clipsim",
                description="clip-level near-duplicate video retrieval")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp):
        sp.add_argument("--config", help="JSON file of dotted config keys")
        sp.add_argument("--seed", type=int, default=42)

    sp = sub.add_parser("synth", help="generate the synthetic benchmark")
    common(sp)
    sp.add_argument("--out", required=True, help="output dataset directory")

    sp = sub.add_parser("pretrain", help="future-frame masked pretraining")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--out", required=True, help="checkpoint output path")

    sp = sub.add_parser("train", help="similarity learning")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--out", help="checkpoint output path")
    sp.add_argument("--init", help="checkpoint to warm-start from")
    sp.add_argument("--ablation", action="store_true",
                    help="run the four-way feature comparison instead")
    sp.add_argument("--annotations", help="annotation file (ablation mode)")
    sp.add_argument("--k", type=int, help="top-k for ablation evaluation")

    sp = sub.add_parser("extract", help="encode videos into a feature store")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--checkpoint", help="trained weights; omit for the "
                                         "seeded untrained model")
    sp.add_argument("--store", required=True, help="feature store output")

    sp = sub.add_parser("query", help="rank the corpus for one query id")
    common(sp)
    sp.add_argument("query_id")
    sp.add_argument("--store", required=True)
    sp.add_argument("--k", type=int)

    sp = sub.add_parser("eval", help="mAP over all annotated queries")
    common(sp)
    sp.add_argument("--store", required=True)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--task", choices=("dsvr", "csvr", "isvr"))
    sp.add_argument("--k", type=int)

    sp = sub.add_parser("selfcheck", help="run built-in verification suites")
    common(sp)
    return p


def default_params(cfg: ModelConfig, seed: int) -> dict:
    """Untrained weights: the exact initialization `train` starts from."""
    return init_encoder_params(cfg, Rng(seed).split("init"))


def _encoder_only(params: dict) -> dict:
    return {k: v for k, v in params.items() if not k.startswith("dec.")}


def _load_dataset(data_dir):
    manifest = load_manifest(data_dir)
    videos = {}
    for vid in sorted(manifest["videos"]):
        path = os.path.join(data_dir, "videos", f"{vid}.cslc")
        videos[vid] = read_video(path)
    return videos, manifest


def extract_index(videos: dict, params: dict, cfg: ModelConfig,
                  clip_len: int | None = None) -> CorpusIndex:
    """Encode every video clip-wise into a retrieval index."""
    length = cfg.frames if clip_len is None else clip_len
    mats = {}
    for vid in sorted(videos):
        clips = video_to_clips(videos[vid], length)
        mats[vid] = encode_clips(list(clips), params, cfg).data
    return CorpusIndex(mats)


def _run_synth(args, cfg) -> int:
    manifest = generate(args.out, args.seed,
                        corpus=cfg["synth.corpus"],
                        queries=cfg["synth.queries"],
                        per_label=cfg["synth.per_label"])
    print(f"wrote {len(manifest['videos'])} videos "
          f"({manifest['queries']} queries) to {args.out}")
    return 0


def _run_pretrain(args, cfg) -> int:
    videos, _ = _load_dataset(args.data)
    mcfg = cfg.model_config()
    pcfg = cfg.pretrain_config(args.seed, args.steps, args.batch)
    metrics = f"{args.out}.csv"
    _, losses = pretrain_run(list(videos.values()), mcfg, pcfg,
                             checkpoint_path=args.out, metrics_path=metrics)
    if losses:
        print(f"pretrained {pcfg.steps} steps: loss {losses[0]:.6f} -> "
              f"{losses[-1]:.6f}")
    print(f"checkpoint: {args.out}")
    print(f"metrics: {metrics}")
    return 0


ABLATION_ROWS = (
    ("baseline", False, False, False),
    ("+shotmix", True, False, False),
    ("+fcs", True, True, False),
    ("+topk", True, True, True),
)


def run_ablation(videos: dict, annotations, mcfg: ModelConfig,
                 tcfg: TrainConfig, k: int, init_params=None,
                 task: str = "DSVR"):
    """Train the four feature combinations and evaluate each.

    Rows cumulatively enable splice sampling, the flip hinge, and
    top-k matching (off = full-average matching). Returns [(name,
    mAP)]; training seeds are shared so rows differ only by feature.
    """
    results = []
    base_loss = tcfg.loss
    for name, mix_on, fcs_on, topk_on in ABLATION_ROWS:
        loss = LossConfig(alpha=base_loss.alpha, beta=base_loss.beta,
                          lam=base_loss.lam, eps=base_loss.eps,
                          gamma=base_loss.gamma, w1=base_loss.w1,
                          w2=base_loss.w2 if fcs_on else 0.0,
                          anchors=base_loss.anchors)
        row_cfg = TrainConfig(steps=tcfg.steps, batch=tcfg.batch,
                              base_lr=tcfg.base_lr, lr_scale=tcfg.lr_scale,
                              weight_decay=tcfg.weight_decay,
                              bank_capacity=tcfg.bank_capacity,
                              mix_prob=tcfg.mix_prob if mix_on else 0.0,
                              seed=tcfg.seed, loss=loss)
        params, _ = train_run(videos, mcfg, row_cfg,
                              init_params=init_params)
        index = extract_index(videos, params, mcfg)
        res = evaluate(index, annotations, task,
                       k=k if topk_on else _CHAMFER_K)
        results.append((name, res.map))
    return results


def _run_train(args, cfg) -> int:
    videos, _ = _load_dataset(args.data)
    mcfg = cfg.model_config()
    tcfg = cfg.train_config(args.seed, args.steps, args.batch)
    init_params = None
    if args.init:
        init_params = _encoder_only(load_checkpoint(args.init))
    if args.ablation:
        if not args.annotations:
            raise UsageError("--ablation requires --annotations")
        annotations = load_annotations(args.annotations)
        k = args.k if args.k is not None else cfg["eval.k"]
        rows = run_ablation(videos, annotations, mcfg, tcfg, k,
                            init_params=init_params)
        print(f"{'config':<10} {'shotmix':<8} {'fcs':<5} {'topk':<5} "
              f"{'dsvr_map':<8}")
        for (name, value), (_, mix_on, fcs_on, topk_on) in zip(
                rows, ABLATION_ROWS):
            print(f"{name:<10} {'yes' if mix_on else 'no':<8} "
                  f"{'yes' if fcs_on else 'no':<5} "
                  f"{'yes' if topk_on else 'no':<5} {value:.4f}")
        maps = [value for _, value in rows]
        monotone = all(b >= a for a, b in zip(maps, maps[1:]))
        print(f"monotone improvement: {'yes' if monotone else 'no'} "
              f"(reported, not asserted)")
        return 0
    metrics = f"{args.out}.csv" if args.out else None
    params, history = train_run(videos, mcfg, tcfg, init_params=init_params,
                                checkpoint_path=args.out,
                                metrics_path=metrics)
    if history:
        print(f"trained {tcfg.steps} steps: total loss "
              f"{history[0]['total']:.6f} -> {history[-1]['total']:.6f}")
    if args.out:
        print(f"checkpoint: {args.out}")
        print(f"metrics: {metrics}")
    return 0


def _run_extract(args, cfg) -> int:
    videos, _ = _load_dataset(args.data)
    mcfg = cfg.model_config()
    if args.checkpoint:
        params = _encoder_only(load_checkpoint(args.checkpoint))
    else:
        params = default_params(mcfg, args.seed)
    index = extract_index(videos, params, mcfg)
    write_store(index, args.store)
    total = sum(mat.shape[0] for _, mat in index.items())
    print(f"stored {total} clip vectors for {len(index)} videos "
          f"in {args.store}")
    return 0


def _run_query(args, cfg) -> int:
    index = read_store(args.store)
    k = args.k if args.k is not None else cfg["eval.k"]
    for vid, score in rank_query(args.query_id, index, k=k):
        print(f"{vid}\t{score:.6f}")
    return 0


def _run_eval(args, cfg) -> int:
    index = read_store(args.store)
    annotations = load_annotations(args.annotations)
    task = (args.task if args.task is not None
            else cfg["eval.task"]).upper()
    k = args.k if args.k is not None else cfg["eval.k"]
    res = evaluate(index, annotations, task, k=k)
    print(f"task={res.task} k={k} queries={len(res.per_query)} "
          f"skipped={res.skipped} map={res.map:.4f}")
    return 0


def _run_selfcheck(args, cfg) -> int:
    results = selfcheck_mod.run_all()
    failed = 0
    for name, ok, detail in results:
        if ok:
            print(f"ok   {name}")
        else:
            failed += 1
            print(f"FAIL {name}: {detail}")
    print(f"{len(results) - failed}/{len(results)} suites passed")
    return 0 if failed == 0 else 1


_RUNNERS = {
    "synth": _run_synth,
    "pretrain": _run_pretrain,
    "train": _run_train,
    "extract": _run_extract,
    "query": _run_query,
    "eval": _run_eval,
    "selfcheck": _run_selfcheck,
}


def dispatch(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        cfg = load_config(args.config)
        print(f"config: {cfg.resolved_json()}", file=sys.stderr)
        return _RUNNERS[args.command](args, cfg)
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        print(_build_parser().format_usage(), end="", file=sys.stderr)
        return 1
    except (FormatError, IntegrityError, UnknownIdError, SamplingError,
            MetricError, ContractError, ShapeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
