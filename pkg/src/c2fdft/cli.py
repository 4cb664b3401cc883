"""``c2fdft`` command line: make-data, train, restore, eval, ablate-steps."""

import argparse
import csv
import logging
import math
import os
import sys
import time
from pathlib import Path

import torch
import torch.nn.functional as F

from . import data as data_mod
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    model_state,
    optimizer_state,
    restore_optimizer,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_config
from .metrics import evaluate_images, evaluate_pairs, list_images, load_image, save_image
from .network import DftModel
from .sampler import sample_restore, timestep_grid
from .schedule import make_schedule
from .trainer import Trainer

log = logging.getLogger("c2fdft")
PREFIX = "c2fdft:"


class CliError(Exception):
    pass


def device():
    return os.environ.get("C2FDFT_DEVICE", "cpu")


def build_schedule(cfg):
    s = cfg.schedule
    return make_schedule(s.T, s.beta_1, s.beta_T)


def model_from_checkpoint(ckpt):
    model = DftModel(ckpt.config.model)
    missing, unexpected = model.load_state_dict(ckpt.params, strict=False)
    if missing or unexpected:
        raise CliError(f"checkpoint parameters do not match the model: missing={missing} unexpected={unexpected}")
    return model


def parse_params(text):
    """'sigma=0.1,length=9:15' -> {'sigma': 0.1, 'length': (9.0, 15.0)}; strings kept as-is."""
    out = {}
    for item in filter(None, (s.strip() for s in (text or "").split(","))):
        if "=" not in item:
            raise CliError(f"bad --params entry {item!r}, expected key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        try:
            out[k] = tuple(float(x) for x in v.split(":")) if ":" in v else float(v)
        except ValueError:
            out[k] = v
    return out


# ---------------------------------------------------------------- make-data

def cmd_make_data(args):
    params = parse_params(args.params)
    if args.synthetic:
        clean = data_mod.synthetic_clean_images(args.synthetic, args.size, seed=args.seed)
        ids = None
    else:
        if not args.src or not Path(args.src).is_dir():
            raise CliError(f"source directory not found: {args.src}")
        files = list_images(args.src)
        if not files:
            raise CliError(f"no clean images in {args.src}")
        clean = [load_image(p) for p in files]
        ids = [p.stem for p in files]
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot write to {args.out}: {exc}") from exc
    ids = data_mod.write_corpus(args.out, clean, args.kind, params, seed=args.seed, ids=ids)
    print(f"wrote {len(ids)} pairs to {args.out}")


# ---------------------------------------------------------------- train

def _overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"bad --set {item!r}, expected key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_pairs(cfg, override=None):
    root = Path(override or cfg.data.root)
    if not str(root) or not (root / "clean").is_dir():
        raise CliError(f"training corpus not found at {root!s} (expected clean/ and degraded/)")
    pairs = data_mod.ingest_pairs(root / "clean", root / "degraded")
    if not pairs:
        raise CliError(f"empty corpus at {root}")
    return pairs


def make_checkpoint(trainer, cfg, meta=None):
    return Checkpoint(
        config=cfg,
        stage=trainer.plan.stage,
        iteration=trainer.iteration,
        params=model_state(trainer.model),
        optimizer=optimizer_state(trainer.model, trainer.optimizer),
        meta={"seed": cfg.seed, **(meta or {})},
    )


def cmd_train(args):
    stage = args.stage
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overrides = _overrides(args.set)
    resume = load_checkpoint(args.resume) if args.resume else None
    init = None

    if resume is not None:
        if resume.stage != stage:
            raise CliError(f"--resume checkpoint is a {resume.stage} checkpoint, not {stage}")
        cfg = resume.config
        meta = dict(resume.meta)
        model = model_from_checkpoint(resume)
        init_from = meta.get("init_from", "resume")
    else:
        cfg = load_config(args.config, overrides)
        meta = {}
        if stage == "fine":
            if not args.init:
                raise CliError("fine training needs --init pointing at a coarse checkpoint "
                               "(the fine stage starts from coarse-trained parameters)")
            init = load_checkpoint(args.init)
            if init.stage != "coarse":
                raise CliError(f"--init {args.init} is a {init.stage} checkpoint, expected a coarse one")
            if init.config.model.to_dict() != cfg.model.to_dict():
                log.info("using the model section of the coarse checkpoint")
            cfg.model = init.config.model
            model = model_from_checkpoint(init)
            init_from = str(args.init)
            meta["init_from"] = init_from
        else:
            torch.manual_seed(cfg.seed)
            model = DftModel(cfg.model)
            init_from = None

    pairs = _load_pairs(cfg, args.data)
    if args.data:
        cfg.data.root = str(args.data)
    sched = build_schedule(cfg)
    plan = cfg.plan(stage)
    trainer = Trainer(model, sched, plan, pairs, device=device(), init_from=init_from,
                      log_file=out / f"{stage}_metrics.log")
    if resume is not None:
        restore_optimizer(trainer.model, trainer.optimizer, resume.optimizer)
        trainer.iteration = resume.iteration

    def on_ckpt(tr):
        save_checkpoint(make_checkpoint(tr, cfg, meta), out / f"{stage}_{tr.iteration:07d}.c2f")

    until = args.stop_at if args.stop_at else None
    trainer.run(until=until, on_checkpoint=on_ckpt)
    final = out / (f"{stage}_final.c2f" if trainer.iteration == plan.total_iters else f"{stage}_{trainer.iteration:07d}.c2f")
    save_checkpoint(make_checkpoint(trainer, cfg, meta), final)
    if trainer.losses:
        print(f"{stage}: iterations {trainer.iteration}/{plan.total_iters}, "
              f"first loss {trainer.losses[0]:.6f}, last loss {trainer.losses[-1]:.6f}")
    print(f"checkpoint: {final}")


# ---------------------------------------------------------------- restore

def pad_to_multiple(img, m=8):
    """Reflect-pad a (B, C, H, W) tensor on the bottom/right to multiples of m."""
    H, W = img.shape[-2:]
    ph, pw = (-H) % m, (-W) % m
    if ph or pw:
        img = F.pad(img, (0, pw, 0, ph), mode="reflect")
    return img, (H, W)


@torch.no_grad()
def restore_image(model, sched, y, steps=4, seed=0, callback=None):
    """Restore one (3, H, W) image of any size; returns (3, H, W) clipped to [0, 1]."""
    dev = next(model.parameters()).device
    yb, (H, W) = pad_to_multiple(y[None].to(dev))
    plan = timestep_grid(steps, sched.T)
    out = sample_restore(model, yb, plan, sched, seed=seed, callback=callback)
    return out[0, :, :H, :W].clamp(0, 1).cpu()


def quantize8(img):
    return torch.floor(img.clamp(0, 1) * 255.0 + 0.5) / 255.0


def _load_model(path):
    ckpt = load_checkpoint(path)
    model = model_from_checkpoint(ckpt).to(device())
    model.eval()
    return ckpt, model


def cmd_restore(args):
    if not Path(args.ckpt).is_file():
        raise CliError(f"checkpoint not found: {args.ckpt}")
    ckpt, model = _load_model(args.ckpt)
    sched = build_schedule(ckpt.config)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    files = list_images(args.input)
    if not files:
        raise CliError(f"no images in {args.input}")
    for path in files:
        try:
            y = load_image(path)
        except Exception as exc:
            raise CliError(f"cannot read {path}: {exc}") from exc
        cb = None
        if args.debug_steps:
            dbg = out / "steps"
            dbg.mkdir(exist_ok=True)
            H, W = y.shape[-2:]

            def cb(j, t_prev, x, stem=path.stem, H=H, W=W):
                save_image(x[0, :, :H, :W].clamp(0, 1), dbg / f"{stem}_j{j:02d}_t{t_prev:04d}.png")

        x = restore_image(model, sched, y, steps=args.steps, seed=args.seed, callback=cb)
        save_image(x, out / f"{path.stem}.png")
    print(f"restored {len(files)} image(s) with S={args.steps} into {out}")


# ---------------------------------------------------------------- eval

def _emit_report(report, path):
    if path:
        report.write_csv(path)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["filename", "psnr_db", "ssim"])
        for name, p, s in report.rows:
            w.writerow([name, "inf" if math.isinf(p) else f"{p:.6f}", f"{s:.6f}"])
        mp = report.mean_psnr
        w.writerow(["MEAN", "inf" if math.isinf(mp) else f"{mp:.6f}", f"{report.mean_ssim:.6f}"])


def cmd_eval(args):
    try:
        report = evaluate_pairs(args.pred, args.gt, y_channel=args.y_channel)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc
    _emit_report(report, args.out)


# ---------------------------------------------------------------- ablate-steps

def ablate_steps(model, sched, pairs, steps_list, seed=0, y_channel=True):
    """Rows of (S, mean_psnr, mean_ssim, seconds) over ``pairs``.

    Restored images are quantized to 8 bits, as ``restore`` would write them.
    """
    rows = []
    for S in steps_list:
        t0 = time.perf_counter()
        restored = [quantize8(restore_image(model, sched, p.y, steps=S, seed=seed)) for p in pairs]
        seconds = time.perf_counter() - t0
        report = evaluate_images(((p.id, r, p.x) for p, r in zip(pairs, restored)), y_channel=y_channel)
        rows.append((S, report.mean_psnr, report.mean_ssim, seconds))
    return rows


def cmd_ablate_steps(args):
    try:
        steps = [int(s) for s in args.steps.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError(f"bad --steps {args.steps!r}") from exc
    bad = [s for s in steps if s < 2]
    if bad or not steps:
        raise CliError(f"sampling steps must be >= 2, got {bad or steps}")
    ckpt, model = _load_model(args.ckpt)
    sched = build_schedule(ckpt.config)
    pairs = _load_pairs(ckpt.config, args.corpus)
    y_channel = ckpt.config.eval.y_channel if args.y_channel is None else args.y_channel
    rows = ablate_steps(model, sched, pairs, steps, seed=args.seed, y_channel=y_channel)
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["steps", "psnr_db", "ssim", "seconds"])
        for S, p, s, sec in rows:
            w.writerow([S, "inf" if math.isinf(p) else f"{p:.6f}", f"{s:.6f}", f"{sec:.4f}"])
    finally:
        if args.out:
            fh.close()


# ---------------------------------------------------------------- entry

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{PREFIX} error: {message}\n")


def build_parser():
    p = _Parser(prog="c2fdft", description="Coarse-to-fine diffusion Transformer for image restoration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("make-data", help="synthesize a paired corpus")
    m.add_argument("--kind", choices=data_mod.DEGRADATIONS, required=True)
    m.add_argument("--src", help="directory of clean images")
    m.add_argument("--synthetic", type=int, default=0, help="generate N synthetic clean images instead of --src")
    m.add_argument("--size", type=int, default=32, help="side of synthetic images")
    m.add_argument("--out", required=True)
    m.add_argument("--params", default="", help="e.g. sigma=0.1 or kernel=motion,length=5:9")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_data)

    t = sub.add_parser("train", help="coarse or fine training")
    t.add_argument("--stage", choices=("coarse", "fine"), required=True)
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    t.add_argument("--data", help="corpus root (overrides data.root)")
    t.add_argument("--out", default="runs", help="checkpoint and log directory")
    t.add_argument("--resume", help="checkpoint of an interrupted run of the same stage")
    t.add_argument("--init", help="coarse checkpoint to start fine training from")
    t.add_argument("--stop-at", type=int, default=0, help="stop early at this iteration")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore degraded images")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--steps", type=int, default=4)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--debug-steps", action="store_true", help="also write every intermediate x_t")
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="PSNR/SSIM report")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--y-channel", action="store_true")
    e.add_argument("--out", help="CSV path (default: stdout)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate-steps", help="metrics and wall time per sampling step count")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--steps", default="2,3,4,5,10")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--y-channel", dest="y_channel", action="store_true", default=None)
    a.add_argument("--rgb", dest="y_channel", action="store_false")
    a.add_argument("--out", help="CSV path (default: stdout)")
    a.set_defaults(func=cmd_ablate_steps)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format=f"{PREFIX} %(levelname)s: %(message)s")
    if args.command == "restore" and args.steps < 2:
        print(f"{PREFIX} error: --steps must be >= 2", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except (CliError, ConfigError, CheckpointError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"{PREFIX} error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
