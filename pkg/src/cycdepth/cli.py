"""Command-line entry point: ``cycdepth {gen-data,train,eval,infer,ablation}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import RunConfig, load_config
from .data import (FolderDataset, SyntheticDataset, SyntheticSceneSpec, default_calib, load_disparity,
                   load_image, resize, resize_disparity, save_disparity_png, save_disparity_raster, write_calib,
                   write_sample)
from .inference import CameraCalib, disparity_to_depth, predict_disparity
from .metrics import EvalConfig, MetricsAccumulator, _to_eval_space, evaluate_dataset
from .networks import VARIANTS, ConfigError

EXIT_ERROR = 2


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticSceneSpec(width=args.width, height=args.height)
    spec.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_calib(out / "calib.txt", default_calib(args.width))
    ds = SyntheticDataset(args.count, spec, seed=args.seed, cache=False)
    failures = 0
    for i in range(args.count):
        sample = ds[i]
        try:
            write_sample(out, i, sample)
        except OSError as exc:
            failures += 1
            print(f"error: sample {i:05d}: {exc}", file=sys.stderr)
    print(f"wrote {args.count - failures} samples to {out} (seed={args.seed})")
    return EXIT_ERROR if failures else 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    if args.variant:
        overrides["train.variant"] = args.variant
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    return cfg.with_overrides(overrides)


def cmd_train(args) -> int:
    from .runs import train_run

    cfg = _run_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume else "w"
    with open(out / "train.log", mode) as fh:
        def log(line):
            fh.write(line + "\n")
            fh.flush()
            if not args.quiet:
                print(line)
        trainer = train_run(cfg, log=log, resume=args.resume)
    print(f"final checkpoint {out / 'final.ckpt'} at step {trainer.step}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _eval_config(args) -> EvalConfig:
    crop = tuple(float(v) for v in args.crop.split(",")) if args.crop else None
    return EvalConfig(cap_m=args.cap, crop=crop, evaluate_on=args.on, pooling=args.pooling)


def evaluate_predictions(pred_dir, data_dir, cfg: EvalConfig):
    """Metrics of disparity files ``pred_dir/NNNNN.{png,dsp}`` against a dataset folder."""
    ds = FolderDataset(data_dir)
    acc = MetricsAccumulator(cfg)
    for i, name in enumerate(ds.names):
        sample = ds[i]
        if sample.gt_disparity is None:
            raise FileNotFoundError(f"{data_dir}: no ground-truth disparity for {name}")
        path = next((p for p in (Path(pred_dir) / f"{name}.dsp", Path(pred_dir) / f"{name}.png") if p.exists()), None)
        if path is None:
            raise FileNotFoundError(f"{pred_dir}: no prediction for {name}")
        acc.add(*_to_eval_space(load_disparity(path), sample, cfg))
    return acc.report()


def cmd_eval(args) -> int:
    cfg = _eval_config(args)
    if args.pred:
        report = evaluate_predictions(args.pred, args.data, cfg)
    else:
        from .runs import load_model

        model, run_cfg, _ = load_model(args.ckpt)
        ds = FolderDataset(args.data, size=(run_cfg.data.height, run_cfg.data.width))
        for i in range(len(ds)):
            if ds[i].gt_disparity is None:
                raise FileNotFoundError(f"{args.data}: sample {ds.names[i]} has no ground-truth disparity")
        report = evaluate_dataset(model, ds, cfg)
    print(report.format_line())
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def infer_pair(model, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Left-view disparity [1,H,W] at the input resolution.

    Inputs whose size is not a multiple of the network stride are resized to
    the nearest valid size and the prediction is resized back.
    """
    H, W = left.shape[1:]
    m = 2 ** model.gen_cfg.levels
    h2, w2 = max(m, round(H / m) * m), max(m, round(W / m) * m)
    if (h2, w2) != (H, W):
        _warn(f"input {H}x{W} is not divisible by {m}; resizing to {h2}x{w2}")
        left, right = resize(left, h2, w2), resize(right, h2, w2)
    disp = predict_disparity(model, left[None], right[None])[0]
    if (h2, w2) != (H, W):
        disp = resize_disparity(disp, H, W)
    return disp.astype(np.float32)


def cmd_infer(args) -> int:
    from .runs import load_model

    model, _, _ = load_model(args.ckpt)
    left, right = load_image(args.left), load_image(args.right)
    if left.shape != right.shape:
        raise ValueError(f"left {left.shape[1:]} and right {right.shape[1:]} images differ in size")
    disp = infer_pair(model, left, right)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_disparity_raster(disp, out / "disparity.dsp")
    save_disparity_png(disp, out / "disparity.png")
    written = ["disparity.dsp", "disparity.png"]
    if (args.baseline is None) != (args.focal is None):
        raise ValueError("--baseline and --focal must be given together")
    if args.baseline is not None:
        depth = disparity_to_depth(disp, CameraCalib(args.baseline, args.focal), args.cap)
        save_disparity_raster(depth, out / "depth.dsp")
        written.append("depth.dsp")
    print(f"wrote {', '.join(written)} to {out}")
    return 0


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def cmd_ablation(args) -> int:
    from .experiments import format_table, sweep

    cfg = _run_config(args)
    variants = args.variants.split(",")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    seeds = [int(s) for s in args.seeds.split(",")]
    records = sweep(cfg, variants, seeds, args.cache, log=None if args.quiet else print)
    print(format_table(records))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cycdepth", description="Adversarial stereo depth with cycled generators.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic stereo dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    def run_args(q):
        q.add_argument("--config", help="key=value run config file")
        q.add_argument("--variant", choices=VARIANTS)
        q.add_argument("--out-dir", dest="out_dir")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        q.add_argument("--quiet", action="store_true")

    t = sub.add_parser("train", help="train one variant")
    run_args(t)
    t.add_argument("--resume", metavar="CKPT")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print depth metrics for a checkpoint or a folder of predictions")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred", help="folder of NNNNN.dsp/.png disparity predictions")
    e.add_argument("--data", required=True)
    e.add_argument("--cap", type=float, default=80.0)
    e.add_argument("--on", choices=("depth", "disparity"), default="depth")
    e.add_argument("--crop", help="top,bottom,left,right as fractions")
    e.add_argument("--pooling", choices=("pixel", "image"), default="pixel")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict disparity (and depth) for one stereo pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--left", required=True)
    i.add_argument("--right", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--baseline", type=float, help="stereo baseline in metres")
    i.add_argument("--focal", type=float, help="focal length in pixels")
    i.add_argument("--cap", type=float, default=80.0)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablation", help="train and evaluate variants over seeds (cached)")
    run_args(a)
    a.add_argument("--variants", default="stereo+D,full")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--cache", default="runs/ablation")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
