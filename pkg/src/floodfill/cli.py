"""Command-line entry point wiring the whole pipeline.

Subcommands: gen, train, infer, eval, bench, sweep. Settings come from an
optional JSON config file with flags taking precedence; every run directory
receives the fully resolved config for reproducibility. Report-style outputs
are CSV files, each rendered to a PNG figure alongside unless --no-figures.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 transport error.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig, load_config, resolve_out, save_config
from .data import (
    VolumeFormatError,
    extract_examples,
    gen_synthetic,
    load_volume,
    save_volume,
)
from .inference import FfnPredictor, find_seeds, segment_volume
from .metrics import evaluate_segmentation
from .model import CheckpointError, load_checkpoint
from .trainer import (
    TrainSettings,
    WorkerCrashError,
    bench_scaling,
    run_training,
    smoothed_series,
)
from .transport import ProtocolError, TransportError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_TRANSPORT = 4

EVAL_HEADER = "checkpoint,step,are,voi_split,voi_merge,voi"
BENCH_HEADER = "p,fovs_per_s,efficiency"
SWEEP_HEADER = "batch,lr,smoothed_acc,norm_acc"


def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",") if v]


def _float_list(text: str) -> list:
    return [float(v) for v in text.split(",") if v]


def _parse_dims(text: str):
    parts = _int_list(text)
    if len(parts) == 1:
        return (parts[0],) * 3
    if len(parts) == 3:
        return tuple(parts)
    raise ConfigError(f"--dims wants one edge or x,y,z, got {text!r}")


def _out_dir(path: str) -> str:
    full = resolve_out(path)
    os.makedirs(full, exist_ok=True)
    return full


def _config_from_args(args, extra: dict | None = None) -> RunConfig:
    overrides = {}
    for key in (
        "num_modules features fov_size delta dtype lr lr_policy batch_scale_k "
        "warmup_steps workers batch_per_worker steps transport checkpoint_every "
        "seed move_threshold mask_threshold min_spacing out_dir"
    ).split():
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    overrides.update(extra or {})
    return load_config(getattr(args, "config", None), overrides)


def _load_training_set(args, cfg: RunConfig):
    vol = load_volume(args.image, expect="image")
    labels = load_volume(args.labels, expect="labels")
    return extract_examples(vol, labels, cfg.ffn_config().train_subvol_size)


def cmd_gen(args) -> int:
    dims = _parse_dims(args.dims)
    out = _out_dir(args.out_dir)
    vol, labels = gen_synthetic(dims, args.objects, args.noise_sigma, args.seed)
    image_path = os.path.join(out, "image.ffnv")
    labels_path = os.path.join(out, "labels.ffnv")
    save_volume(image_path, vol)
    save_volume(labels_path, labels)
    print(f"wrote {image_path} and {labels_path} ({dims[0]}x{dims[1]}x{dims[2]}, "
          f"{args.objects} objects, seed {args.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg.out_dir)
    save_config(cfg, out)
    train_set = _load_training_set(args, cfg)
    policy = cfg.lr_policy_obj()
    print(
        f"lr policy: base={policy.base_lr:g} mode={policy.mode} "
        f"k={policy.batch_scale_k} effective={policy.scaled_lr:g} "
        f"warmup={policy.warmup_steps}"
    )
    settings = TrainSettings(
        workers=cfg.workers,
        batch_per_worker=cfg.batch_per_worker,
        steps=cfg.steps,
        seed=cfg.seed,
        transport=cfg.transport,
        checkpoint_every=cfg.checkpoint_every,
        move_threshold=cfg.move_threshold,
        debug_replica_check=args.debug_replica_check,
        out_dir=out,
    )
    result = run_training(cfg.ffn_config(), policy, train_set, settings)
    if result.stats:
        last = result.stats[-1]
        thr = sum(r.fovs for r in result.stats) / result.wall_s[-1]
        print(
            f"trained {cfg.steps} steps: loss={last.loss:.4f} f1={last.f1:.4f} "
            f"throughput={thr:.2f} FOVs/s"
        )
    else:
        print("steps=0: wrote initial checkpoint only")
    print(f"stats: {result.stats_path}")
    print(f"checkpoints: {', '.join(result.checkpoints)}")
    if result.stats and not args.no_figures:
        from .report import save_training_curves

        fig = save_training_curves(
            result.stats, result.wall_s, os.path.join(out, "training_curves.png")
        )
        print(f"figure: {fig}")
    return EXIT_OK


def _checkpoint_list(args) -> list:
    if args.checkpoint:
        return [args.checkpoint]
    paths = sorted(glob.glob(os.path.join(args.all_checkpoints, "*.ffnc")))
    if not paths:
        raise CheckpointError(f"no checkpoints in {args.all_checkpoints}")
    return paths


def _segment_with_checkpoint(ckpt_path, vol, args):
    params, step, _ = load_checkpoint(ckpt_path)
    cfg = params.config
    spacing = args.min_spacing if args.min_spacing > 0 else float(cfg.delta)
    seeds = find_seeds(vol, min_spacing=spacing)
    labels = segment_volume(
        FfnPredictor(cfg, params),
        vol,
        seeds,
        fov_size=cfg.fov_size,
        delta=cfg.delta,
        t_move=args.move_threshold,
        t_mask=args.mask_threshold,
    )
    return labels, step


def cmd_infer(args) -> int:
    if not 0.0 < args.move_threshold <= 1.0:
        raise ConfigError(f"--move-threshold must be in (0, 1], got {args.move_threshold}")
    if not 0.0 < args.mask_threshold < 1.0:
        raise ConfigError(f"--mask-threshold must be in (0, 1), got {args.mask_threshold}")
    vol = load_volume(args.volume, expect="image")
    out = _out_dir(args.out_dir)
    for ckpt in _checkpoint_list(args):
        labels, step = _segment_with_checkpoint(ckpt, vol, args)
        stem = os.path.splitext(os.path.basename(ckpt))[0]
        path = os.path.join(out, f"seg_{stem}.ffnv")
        save_volume(path, labels)
        ids = int(labels.max())
        print(f"{ckpt} (step {step}) -> {path}: {ids} segments")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.pred:
        pred = load_volume(args.pred, expect="labels")
        truth = load_volume(args.truth, expect="labels")
        scores = evaluate_segmentation(
            pred, truth, log_base=args.log_base,
            include_background=args.include_background,
        )
        print(scores.to_json())
        if args.out:
            path = resolve_out(args.out)
            with open(path, "w") as fh:
                fh.write(scores.to_json() + "\n")
            print(f"scores: {path}")
        return EXIT_OK

    # checkpoint-sweep mode: run inference per checkpoint, score each result
    vol = load_volume(args.volume, expect="image")
    truth = load_volume(args.truth, expect="labels")
    out = _out_dir(args.out_dir)
    rows = []
    args.checkpoint = None
    args.all_checkpoints = args.checkpoints
    for ckpt in _checkpoint_list(args):
        labels, step = _segment_with_checkpoint(ckpt, vol, args)
        scores = evaluate_segmentation(
            labels, truth, log_base=args.log_base,
            include_background=args.include_background,
        )
        rows.append(
            (os.path.basename(ckpt), step, scores.are, scores.voi_split,
             scores.voi_merge, scores.voi)
        )
        print(
            f"{os.path.basename(ckpt)} step={step} are={scores.are:.4f} "
            f"voi={scores.voi:.4f}"
        )
    csv_path = os.path.join(out, "eval.csv")
    with open(csv_path, "w") as fh:
        fh.write(EVAL_HEADER + "\n")
        for name, step, are, vs, vm, vt in rows:
            fh.write(f"{name},{step},{are!r},{vs!r},{vm!r},{vt!r}\n")
    print(f"scores: {csv_path}")
    if not args.no_figures:
        from .report import save_eval_figure

        print(f"figure: {save_eval_figure(rows, os.path.join(out, 'eval_scores.png'))}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg.out_dir)
    save_config(cfg, out)
    train_set = _load_training_set(args, cfg)
    cores = os.cpu_count() or 1
    too_big = [p for p in args.workers_list if p > cores]
    if too_big:
        print(
            f"note: worker counts {too_big} exceed the {cores} available cores; "
            "their efficiency readings will be oversubscribed",
            file=sys.stderr,
        )
    rows = bench_scaling(
        cfg.ffn_config(),
        cfg.lr_policy_obj(),
        train_set,
        args.workers_list,
        batch_per_worker=cfg.batch_per_worker,
        steps=cfg.steps,
        warmup_steps=args.timing_warmup,
        seed=cfg.seed,
    )
    csv_path = os.path.join(out, "bench.csv")
    with open(csv_path, "w") as fh:
        fh.write(BENCH_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.p},{r.fovs_per_s!r},{r.efficiency!r}\n")
            print(f"p={r.p}: {r.fovs_per_s:.2f} FOVs/s, efficiency {r.efficiency:.3f}")
    print(f"bench: {csv_path}")
    if not args.no_figures:
        from .report import save_scaling_figure

        print(f"figure: {save_scaling_figure(rows, os.path.join(out, 'scaling.png'))}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cells = len(args.batches) * len(args.lrs)
    if cells > args.max_cells:
        raise ConfigError(
            f"sweep grid has {cells} cells ({len(args.batches)} batches x "
            f"{len(args.lrs)} lrs), above --max-cells {args.max_cells}; "
            f"estimated cost is {cells} training runs of {args.steps} steps each"
        )
    cfg = _config_from_args(args)
    out = _out_dir(cfg.out_dir)
    save_config(cfg, out)
    train_set = _load_training_set(args, cfg)
    results = []
    for batch in args.batches:
        for lr in args.lrs:
            policy_cfg = RunConfig(**{
                **cfg.__dict__, "lr": lr, "lr_policy": "fixed",
                "workers": 1, "batch_per_worker": batch,
            })
            settings = TrainSettings(
                workers=1,
                batch_per_worker=batch,
                steps=cfg.steps,
                seed=cfg.seed,
            )
            result = run_training(
                cfg.ffn_config(), policy_cfg.lr_policy_obj(), train_set, settings
            )
            series = smoothed_series([r.acc for r in result.stats], args.smoothing)
            readout = series[args.readout_step]
            results.append([batch, lr, readout])
            print(f"batch={batch} lr={lr:g}: smoothed acc {readout:.4f}")
    rows = []
    for batch in args.batches:
        group = [r for r in results if r[0] == batch]
        peak = max(r[2] for r in group)
        for _, lr, val in group:
            rows.append((batch, lr, val, val / peak if peak > 0 else 0.0))
    csv_path = os.path.join(out, "sweep.csv")
    with open(csv_path, "w") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for batch, lr, val, norm in rows:
            fh.write(f"{batch},{lr!r},{val!r},{norm!r}\n")
    print(f"sweep: {csv_path}")
    if not args.no_figures:
        from .report import save_sweep_figure

        print(f"figure: {save_sweep_figure(rows, os.path.join(out, 'sweep.png'))}")
    return EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser, defaults=False):
    """Flags mirroring RunConfig fields; None means 'not overridden'."""
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--num-modules", type=int, dest="num_modules")
    p.add_argument("--features", type=int)
    p.add_argument("--fov-size", type=int, dest="fov_size")
    p.add_argument("--delta", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-policy", choices=["fixed", "linear", "sqrt"], dest="lr_policy")
    p.add_argument("--batch-scale-k", type=int, dest="batch_scale_k")
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--workers", type=int)
    p.add_argument("--batch-per-worker", type=int, dest="batch_per_worker")
    p.add_argument("--steps", type=int)
    p.add_argument("--transport", choices=["inproc", "tcp"])
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--seed", type=int)
    p.add_argument("--move-threshold", type=float, dest="move_threshold")
    p.add_argument("--mask-threshold", type=float, dest="mask_threshold")
    p.add_argument("--min-spacing", type=float, dest="min_spacing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="floodfill",
        description="Flood-filling-network segmentation: data, training, "
        "inference, evaluation, and benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic labeled volume")
    p.add_argument("--dims", required=True, help="cube edge or x,y,z")
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--noise-sigma", type=float, default=10.0, dest="noise_sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="data", dest="out_dir")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on an image + label volume pair")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--debug-replica-check", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a volume with trained checkpoints")
    p.add_argument("--volume", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--all-checkpoints", dest="all_checkpoints")
    p.add_argument("--out-dir", default="inference", dest="out_dir")
    p.add_argument("--move-threshold", type=float, default=0.9, dest="move_threshold")
    p.add_argument("--mask-threshold", type=float, default=0.5, dest="mask_threshold")
    p.add_argument("--min-spacing", type=float, default=0.0, dest="min_spacing")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a prediction, or sweep checkpoints")
    p.add_argument("--pred")
    p.add_argument("--truth", required=True)
    p.add_argument("--checkpoints", help="directory: infer+score every checkpoint")
    p.add_argument("--volume", help="image volume (checkpoint-sweep mode)")
    p.add_argument("--log-base", choices=["e", "2"], default="e", dest="log_base")
    p.add_argument("--include-background", action="store_true")
    p.add_argument("--out", help="scores JSON path (single mode)")
    p.add_argument("--out-dir", default="evaluation", dest="out_dir")
    p.add_argument("--move-threshold", type=float, default=0.9, dest="move_threshold")
    p.add_argument("--mask-threshold", type=float, default=0.5, dest="mask_threshold")
    p.add_argument("--min-spacing", type=float, default=0.0, dest="min_spacing")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="throughput scaling over worker counts")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--workers-list", type=_int_list, default=[1, 2],
                   dest="workers_list")
    p.add_argument("--timing-warmup", type=int, default=2, dest="timing_warmup",
                   help="leading steps excluded from throughput timing")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--no-figures", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="accuracy over a (batch, lr) grid")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--batches", type=_int_list, default=[1, 2])
    p.add_argument("--lrs", type=_float_list, default=[6e-4, 1.2e-3, 2.4e-3])
    p.add_argument("--smoothing", type=float, default=0.9)
    p.add_argument("--readout-step", type=int, default=-1, dest="readout_step")
    p.add_argument("--max-cells", type=int, default=64, dest="max_cells")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--no-figures", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval":
        single = bool(args.pred)
        sweep = bool(args.checkpoints)
        if single == sweep:
            parser.error("eval needs either --pred or --checkpoints (with --volume)")
        if sweep and not args.volume:
            parser.error("--checkpoints mode needs --volume")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeFormatError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TransportError, ProtocolError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except WorkerCrashError as exc:
        cause = exc.__cause__
        transport = isinstance(cause, (TransportError, ProtocolError))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT if transport else EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
