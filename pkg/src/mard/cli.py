"""Command-line surface: train, sample, eval, sweep, oracle-check.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every run writes its
fully resolved config next to its outputs; no command mutates its inputs.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import faults, oracles
from .data import read_image, tokenize_batch, write_image, write_manifest
from .metrics import (FeatureScaler, desk_features, desk_frechet, diversity,
                      energy_distance, speed_accuracy_sweep)
from .models import TrainError
from .optim import OptimError
from .pipeline import (ConfigError, RunConfig, build_data, build_model,
                       generate_images, load_checkpoint_into, save_run,
                       train_model)
from .rng import Rng

USAGE_EXIT = 1
RUNTIME_EXIT = 2

METRICS_COLUMNS = ["run_id", "variant", "head", "steps", "diff_steps", "tau",
                   "omega", "seed", "desk_frechet", "energy_dist", "diversity",
                   "wall_ms"]
MANIFEST_COLUMNS = ["image_id", "class", "variant", "steps", "tau", "omega",
                    "seed", "wall_ms"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        "seed": args.seed,
        "mar_steps": getattr(args, "steps", None),
        "diff_steps": getattr(args, "diff_steps", None),
        "tau": getattr(args, "tau", None),
        "omega": getattr(args, "omega", None),
        "variant": getattr(args, "variant", None),
        "head": getattr(args, "head", None),
        "out": getattr(args, "out", None),
    }
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    cfg.__post_init__()
    return cfg


def _add_common(p: argparse.ArgumentParser, sample_flags: bool = True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output root directory")
    if sample_flags:
        p.add_argument("--steps", type=int, default=None, help="autoregressive steps")
        p.add_argument("--diff-steps", dest="diff_steps", type=int, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--omega", type=float, default=None)
        p.add_argument("--variant", default=None)
        p.add_argument("--head", default=None)


def _run_dir(cfg: RunConfig, tag: str) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(cfg.out, f"{stamp}-{tag}")
    suffix = 0
    while os.path.exists(path):
        suffix += 1
        path = os.path.join(cfg.out, f"{stamp}-{tag}.{suffix}")
    os.makedirs(path)
    return path


def _mar_generation_steps(cfg: RunConfig) -> int:
    n = (cfg.image_size // cfg.patch) ** 2
    if cfg.variant.endswith("causal"):
        return n
    return cfg.mar_steps


# -- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = _run_dir(cfg, f"train-{cfg.variant}-{cfg.head}")
    bundle = build_data(cfg)
    model, store, shadow = build_model(cfg, bundle)
    if cfg.resume:
        stats = load_checkpoint_into(os.path.join(cfg.resume, "checkpoint.bin"), store)
        load_checkpoint_into(os.path.join(cfg.resume, "checkpoint.ema.bin"), shadow)
        shadow.step = store.step
        bundle.stats = stats
        print(f"resumed from {cfg.resume} at step {store.step}")

    def log(step, loss, lr):
        print(f"step {step:6d}  loss {loss:.4f}  lr {lr:.5f}")

    history = train_model(cfg, bundle, model, store, shadow, log=log)
    save_run(run_dir, cfg, store, shadow, bundle.stats, history)
    print(f"wrote {run_dir}/checkpoint.bin, checkpoint.ema.bin, loss.csv")
    return 0


def _load_model_for_inference(args, cfg: RunConfig):
    model, store, _ = build_model(cfg, None)
    ckpt = getattr(args, "checkpoint", None)
    if not ckpt:
        raise FileNotFoundError("pass --checkpoint (checkpoint.bin or checkpoint.ema.bin)")
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    stats = load_checkpoint_into(ckpt, store)
    return model, store, stats


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    model, store, stats = _load_model_for_inference(args, cfg)
    run_dir = _run_dir(cfg, "samples")
    cfg.to_file(os.path.join(run_dir, "config.resolved"))
    n = args.n
    label = args.class_id
    rng = Rng(cfg.seed)
    rows = []
    steps = _mar_generation_steps(cfg)
    sampler = cfg.sampler_config()
    if n > 0:
        t0 = time.perf_counter()
        images = generate_images(cfg, model, store, stats,
                                 np.full(n, label, dtype=np.int64), steps, sampler, rng)
        wall_ms = (time.perf_counter() - t0) * 1000.0 / n
        for i in range(n):
            name = f"sample_{i:04d}.{args.format}"
            write_image(os.path.join(run_dir, name), images[i])
            rows.append([i, label, cfg.variant, steps, cfg.tau, cfg.omega, cfg.seed,
                         f"{wall_ms:.2f}"])
    write_manifest(os.path.join(run_dir, "manifest.csv"), rows, MANIFEST_COLUMNS)
    print(f"wrote {len(rows)} images + manifest to {run_dir}")
    return 0


def _reference_images(cfg: RunConfig):
    from .data import generate_dataset

    spec = cfg.image_spec(size=cfg.eval_samples)
    return generate_dataset(spec, "val")


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ref_images, ref_labels = _reference_images(cfg)
    scaler = FeatureScaler.fit(ref_images)
    rng = Rng(cfg.seed)
    wall_ms = 0.0

    if args.samples:
        files = sorted(f for f in os.listdir(args.samples)
                       if f.endswith((".ppm", ".png")))
        if not files:
            raise FileNotFoundError(f"no images in {args.samples}")
        images = np.stack([read_image(os.path.join(args.samples, f)) for f in files])
        labels = np.zeros(len(images), dtype=np.int64)
    else:
        model, store, stats = _load_model_for_inference(args, cfg)
        labels = np.arange(cfg.eval_samples, dtype=np.int64) % cfg.classes
        steps = _mar_generation_steps(cfg)
        t0 = time.perf_counter()
        images = generate_images(cfg, model, store, stats, labels, steps,
                                 cfg.sampler_config(), rng)
        wall_ms = (time.perf_counter() - t0) * 1000.0 / len(labels)

    if images.shape[1:] != ref_images.shape[1:]:
        raise ValueError(f"sample/reference shape mismatch: "
                         f"{images.shape[1:]} vs {ref_images.shape[1:]}")
    fd = desk_frechet(images, ref_images, scaler)
    ed = energy_distance(desk_features(images, scaler), desk_features(ref_images, scaler))
    div = _mean_class_diversity(cfg, images, labels)

    run_dir = _run_dir(cfg, "eval")
    cfg.to_file(os.path.join(run_dir, "config.resolved"))
    row = [os.path.basename(run_dir), cfg.variant, cfg.head, _mar_generation_steps(cfg),
           cfg.diff_steps, cfg.tau, cfg.omega, cfg.seed,
           f"{fd:.6f}", f"{ed:.6f}", f"{div:.6f}", f"{wall_ms:.2f}"]
    write_manifest(os.path.join(run_dir, "metrics.csv"), [row], METRICS_COLUMNS)
    print(f"desk_frechet={fd:.5f} energy_dist={ed:.5f} diversity={div:.5f}")
    print(f"wrote {run_dir}/metrics.csv")
    return 0


def _mean_class_diversity(cfg: RunConfig, images, labels) -> float:
    tokens = tokenize_batch(images, cfg.patch)
    vals = []
    for c in np.unique(labels):
        sel = tokens[labels == c]
        if len(sel) >= 2:
            vals.append(diversity(sel.reshape(len(sel), -1)))
    return float(np.mean(vals)) if vals else 0.0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    model, store, stats = _load_model_for_inference(args, cfg)
    ref_images, _ = _reference_images(cfg)
    scaler = FeatureScaler.fit(ref_images)
    rng = Rng(cfg.seed)
    n_eval = args.sweep_samples

    def generate_fn(steps, diff_steps, batch):
        count = batch if batch is not None else n_eval
        labels = np.arange(count, dtype=np.int64) % cfg.classes
        sampler = cfg.sampler_config(steps=diff_steps)
        return generate_images(cfg, model, store, stats, labels, steps, sampler, rng)

    def score_fn(images):
        return desk_frechet(images, ref_images, scaler)

    mar_steps = [int(s) for s in args.mar_steps.split(",")]
    diff_steps = [int(s) for s in args.diffusion_steps.split(",")]
    rows = speed_accuracy_sweep(generate_fn, score_fn, mar_steps, diff_steps,
                                timing_repeats=args.timing_repeats)
    run_dir = _run_dir(cfg, "sweep")
    cfg.to_file(os.path.join(run_dir, "config.resolved"))
    out_rows = [[os.path.basename(run_dir), cfg.variant, cfg.head, r["steps"],
                 r["diff_steps"], cfg.tau, cfg.omega, cfg.seed,
                 f"{r['desk_frechet']:.6f}", f"{r['wall_ms_per_image']:.3f}"]
                for r in rows]
    write_manifest(os.path.join(run_dir, "sweep.csv"), out_rows,
                   ["run_id", "variant", "head", "steps", "diff_steps", "tau",
                    "omega", "seed", "desk_frechet", "wall_ms_per_image"])
    print(f"wrote {run_dir}/sweep.csv ({len(out_rows)} rows)")
    return 0


def cmd_oracle_check(args) -> int:
    if args.inject_fault and args.inject_fault != "none":
        faults.inject(args.inject_fault)
        print(f"injected fault: {args.inject_fault}")
    try:
        ok = oracles.run_all(report=print)
    finally:
        faults.clear()
    print("oracle-check:", "all suites passed" if ok else "FAILURES above")
    return 0 if ok else RUNTIME_EXIT


# -- entry -------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="mard", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoints")
    _add_common(t)

    s = sub.add_parser("sample", help="generate images from a checkpoint")
    _add_common(s)
    s.add_argument("--checkpoint", required=False)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--class-id", dest="class_id", type=int, default=0)
    s.add_argument("--format", choices=("ppm", "png"), default="ppm")

    e = sub.add_parser("eval", help="score samples against a reference split")
    _add_common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--samples", help="directory of images instead of a checkpoint")

    w = sub.add_parser("sweep", help="speed/accuracy sweep CSV")
    _add_common(w)
    w.add_argument("--checkpoint", required=False)
    w.add_argument("--mar-steps", dest="mar_steps", default="8,16,32,64")
    w.add_argument("--diffusion-steps", dest="diffusion_steps", default="10,25,50,100")
    w.add_argument("--sweep-samples", dest="sweep_samples", type=int, default=48)
    w.add_argument("--timing-repeats", dest="timing_repeats", type=int, default=5)

    o = sub.add_parser("oracle-check", help="run the oracle verification gate")
    o.add_argument("--inject-fault", choices=("none",) + faults.FAULT_NAMES,
                   default="none")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "train": cmd_train,
        "sample": cmd_sample,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
        "oracle-check": cmd_oracle_check,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except (TrainError, OptimError, FileNotFoundError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
