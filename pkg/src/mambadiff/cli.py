"""Command-line entry points: train, sample, upsample, bench, check.

Every command takes ``--config <path>`` (a ``key = value`` file; see
config.py for the key set) plus flag overrides, and writes the effective
configuration next to its artifacts so any run can be reproduced from the
emitted file alone. Precision is selected with DIM_PRECISION=f32|f64.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig, load_config, write_effective_config
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .diffusion import (
    UpsampleGuidance,
    cfg_predict,
    guided_sample_loop,
    sample_loop,
)
from .data import write_image_ppm
from .model import Denoiser
from .tensor import tensor
from .training import NonFiniteLossError, Trainer

log = logging.getLogger("mambadiff")


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value configuration file")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mambadiff", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model (optionally fine-tuning from a checkpoint)")
    _common_flags(p)
    p.add_argument("--init-from", default=None, help="checkpoint to initialize weights from")

    p = sub.add_parser("sample", help="sample images from a trained checkpoint")
    _common_flags(p)
    p.add_argument("checkpoint", help="model checkpoint (.ckpt)")
    p.add_argument("--cfg", type=float, default=None, help="classifier-free guidance weight")
    p.add_argument("--steps", type=int, default=None, help="solver steps (default 50)")

    p = sub.add_parser("upsample", help="sample beyond the training resolution with upsample guidance")
    _common_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("--cfg", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--scale", type=int, default=None, help="integer upscaling factor m")
    p.add_argument("--ug-weight", type=float, default=None, help="guidance weight (0 disables)")
    p.add_argument("--ug-window", type=float, default=None, help="active fraction of solver steps")

    p = sub.add_parser("bench", help="scan-vs-attention scaling benchmark")
    _common_flags(p)

    p = sub.add_parser("check", help="run invariant suites")
    p.add_argument("--suite", default=None, help="one suite name (default: all)")
    return ap


def _config_from_args(args, extra: dict | None = None) -> RunConfig:
    overrides: dict = dict(extra or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    write_effective_config(cfg, args.out)
    trainer = Trainer(cfg, init_from=args.init_from)
    try:
        losses = trainer.run(args.out)
    except NonFiniteLossError as e:
        log.error("aborted: %s (last periodic checkpoint retained in %s)", e, args.out)
        return 2
    first = float(np.mean(losses[: max(1, min(50, len(losses)))]))
    last = float(np.mean(losses[-max(1, min(50, len(losses))) :]))
    print(f"trained {len(losses)} steps: smoothed loss {first:.4f} -> {last:.4f}")
    print(f"artifacts in {args.out}: model.ckpt, model.ema.ckpt, metrics.csv")
    return 0


def _load_for_sampling(args, cfg: RunConfig):
    model = Denoiser(cfg.model_config(), seed=cfg.seed)
    stored_cfg = load_checkpoint(model, args.checkpoint)
    return model, stored_cfg


def _eps_fn(model, labels: np.ndarray, scale: float):
    def eps(x, t):
        tt = np.full(x.shape[0], t, dtype=np.float64)
        return cfg_predict(model, tensor(x), tt, labels, scale).data

    return eps


def cmd_sample(args) -> int:
    extra = {}
    if args.cfg is not None:
        extra["cfg_scale"] = args.cfg
    if args.steps is not None:
        extra["sample_steps"] = args.steps
    cfg = _config_from_args(args, extra)
    ckpt_cfg, _ = read_checkpoint(args.checkpoint)
    for field in ("depth", "hidden", "state_size", "expand", "patch", "in_channels", "n_classes"):
        stored = getattr(ckpt_cfg, field)
        mine = getattr(cfg.model_config(), field)
        if stored != mine:
            raise ConfigError(
                f"checkpoint/config mismatch for {field}: checkpoint has {stored}, config has {mine}"
            )
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(cfg, args.out)
    model, _ = _load_for_sampling(args, cfg)
    sched = cfg.schedule()
    res = cfg.resolution
    for k in range(cfg.classes):
        labels = np.full(cfg.samples_per_class, k, dtype=np.int64)
        rng = np.random.default_rng([cfg.seed, 10, k])
        imgs = sample_loop(
            sched,
            _eps_fn(model, labels, cfg.cfg_scale),
            (cfg.samples_per_class, cfg.channels, res, res),
            cfg.sample_steps,
            rng,
            order=cfg.solver_order,
        )
        for i, img in enumerate(imgs):
            write_image_ppm(img, os.path.join(args.out, f"class{k:02d}_{i:02d}.ppm"))
    print(f"wrote {cfg.classes * cfg.samples_per_class} images to {args.out}")
    return 0


def cmd_upsample(args) -> int:
    extra = {}
    if args.cfg is not None:
        extra["cfg_scale"] = args.cfg
    if args.steps is not None:
        extra["sample_steps"] = args.steps
    if args.scale is not None:
        extra["ug_scale"] = args.scale
    if args.ug_weight is not None:
        extra["ug_weight"] = args.ug_weight
    if args.ug_window is not None:
        extra["ug_window"] = args.ug_window
    cfg = _config_from_args(args, extra)
    if cfg.ug_scale < 1:
        raise ConfigError(f"ug_scale must be a positive integer, got {cfg.ug_scale}")
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(cfg, args.out)
    model, _ = _load_for_sampling(args, cfg)
    sched = cfg.schedule()
    guidance = UpsampleGuidance(sched, scale=cfg.ug_scale, weight=cfg.ug_weight, window=cfg.ug_window, power_mode=cfg.ug_power)
    hi = cfg.resolution * cfg.ug_scale
    for k in range(cfg.classes):
        labels = np.full(cfg.samples_per_class, k, dtype=np.int64)
        rng = np.random.default_rng([cfg.seed, 11, k])
        imgs = guided_sample_loop(
            sched,
            _eps_fn(model, labels, cfg.cfg_scale),
            guidance,
            (cfg.samples_per_class, cfg.channels, hi, hi),
            cfg.sample_steps,
            rng,
            order=cfg.solver_order,
        )
        for i, img in enumerate(imgs):
            write_image_ppm(img, os.path.join(args.out, f"class{k:02d}_{i:02d}_x{cfg.ug_scale}.ppm"))
    active = guidance.active_steps(cfg.sample_steps)
    print(f"wrote {cfg.classes * cfg.samples_per_class} images at {hi}x{hi} (guided steps: {active}/{cfg.sample_steps})")
    return 0


def cmd_bench(args) -> int:
    from .bench import run_bench

    cfg = _config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(cfg, args.out)
    report = run_bench(
        lengths=cfg.bench_lengths,
        hidden=cfg.bench_hidden,
        state_size=cfg.bench_state,
        expand=cfg.bench_expand,
        reps=cfg.bench_reps,
        warmup=cfg.bench_warmup,
        seed=cfg.seed,
    )
    path = os.path.join(args.out, "bench.csv")
    with open(path, "w", encoding="ascii") as f:
        f.write(report.csv())
    print(report.csv(), end="")
    print(f"scan params {report.scan_params}, attention params {report.attention_params}")
    print(f"log-log slope: scan {report.scan_slope:.3f}, attention {report.attention_slope:.3f}")
    if report.crossover is not None:
        print(f"scan faster than attention from L = {report.crossover}")
    else:
        print("no crossover within the measured grid")
    print(f"report written to {path}")
    return 0


def cmd_check(args) -> int:
    from .checks import run_suites

    _, code = run_suites([args.suite] if args.suite else None)
    return code


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "sample": cmd_sample,
        "upsample": cmd_upsample,
        "bench": cmd_bench,
        "check": cmd_check,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
