"""Operator command line: train / synthesize / bench / export-field."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import trainer as TR
from .bench import report_record, report_table, run_bench
from .core import Engine, UpdateRule, preset
from .fields import FIELD_NAMES, FieldKind, colorize_flow, generate_field, read_field_raw, write_field_raw
from .media import load_image, load_video_dir, save_image
from .service import SessionServer
from .weights import load_rule


def _parse_size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 128x128, got {text!r}")


def _parse_addr(text: str):
    host, _, port = text.rpartition(":")
    if not host:
        raise argparse.ArgumentTypeError(f"address must look like host:port, got {text!r}")
    return host, int(port)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynca",
                                description="dynamic texture synthesis: training, synthesis, benchmarking")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on an appearance + motion target")
    t.add_argument("--mode", choices=("vec", "video", "style"), required=True)
    t.add_argument("--appearance", required=True, help="target appearance PNG")
    t.add_argument("--motion", required=True,
                   help="field name, raw .f32 field file (vec), or frame directory (video/style)")
    t.add_argument("--config", choices=("S", "L"), default="S")
    t.add_argument("--seed-size", type=int, default=128, choices=(64, 128, 256))
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="manual motion weight (required for style mode)")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--metrics", default=None, help="metrics JSONL path (default <out>.metrics.jsonl)")

    s = sub.add_parser("synthesize", help="roll out a trained model")
    s.add_argument("--weights", required=True)
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--size", type=_parse_size, default=(128, 128))
    s.add_argument("--seed", type=int, default=0)
    out = s.add_mutually_exclusive_group(required=True)
    out.add_argument("--out", help="directory for PNG frames")
    out.add_argument("--serve", type=_parse_addr, help="host:port for the streaming session server")
    s.add_argument("--fps-cap", type=float, default=60.0)

    b = sub.add_parser("bench", help="measure steps/s, FPS, ms/step over timed steps")
    b.add_argument("--config", choices=("S", "L"), default="S")
    b.add_argument("--size", type=_parse_size, default=(128, 128))
    b.add_argument("--T", dest="frame_interval", type=int, default=24)
    b.add_argument("--weights", default=None, help="bench a trained checkpoint instead")
    b.add_argument("--steps", type=int, default=500)
    b.add_argument("--warmup", type=int, default=50)
    b.add_argument("--threads", type=int, default=1)

    e = sub.add_parser("export-field", help="emit a target vector field as PNG and/or raw f32")
    e.add_argument("--field", required=True)
    e.add_argument("--size", type=_parse_size, default=(128, 128))
    e.add_argument("--out-png", default=None)
    e.add_argument("--out-raw", default=None)
    return p


def cli_train(args) -> int:
    h = w = args.seed_size
    cfg = preset(args.config, seed_size=args.seed_size,
                 frame_interval=24 if args.mode == "vec" else 64)
    appearance = load_image(args.appearance)

    if args.mode == "vec":
        motion = args.motion.lower()
        if motion in FIELD_NAMES:
            target = TR.TargetSpec(appearance=appearance, motion_kind=FieldKind(motion))
        elif Path(args.motion).is_file():
            target = TR.TargetSpec(appearance=appearance,
                                   motion_field=read_field_raw(args.motion, h, w))
        else:
            print(f"unknown field {args.motion!r}; valid names: {', '.join(FIELD_NAMES)}",
                  file=sys.stderr)
            return 2
    else:
        frames = load_video_dir(args.motion)
        target = TR.TargetSpec(appearance=appearance, motion_video=frames,
                               lambda_override=args.lam)
        if args.mode == "style" and args.lam is None:
            print("style mode needs a manual --lambda (automatic weighting misbehaves "
                  "when appearance and motion sources disagree)", file=sys.stderr)
            return 2

    plan = TR.TrainPlan(mode=args.mode, seed=args.seed, lam=args.lam)
    if args.epochs is not None:
        plan.epochs = args.epochs
    trainer = TR.Trainer(cfg, plan, target, h=h, w=w)

    metrics_path = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")
    with open(metrics_path, "w") as mf:
        def log(m):
            mf.write(json.dumps(m) + "\n")

        if args.mode == "video" and args.lam is None:
            lam = TR.auto_lambda(trainer, log=log)
            print(f"auto lambda: {lam:.3f}")
        trainer.run(log=log)

    TR.save_checkpoint(args.out, trainer.rule, cfg)
    print(f"checkpoint written to {args.out}")
    print(f"metrics written to {metrics_path}")
    return 0


def cli_synthesize(args) -> int:
    try:
        rule, cfg = load_rule(args.weights)
    except Exception as e:
        print(f"cannot load weights: {e}", file=sys.stderr)
        return 1
    h, w = args.size
    if args.serve:
        host, port = args.serve
        server = SessionServer(rule, cfg, host=host, port=port, h=h, w=w,
                               seed=args.seed, fps_cap=args.fps_cap)
        print(f"serving on {server.address[0]}:{server.address[1]}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            server.stop()
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eng = Engine(cfg, rule, h, w, seed=args.seed)
    for k in range(args.frames):
        eng.step(cfg.frame_interval)
        save_image(out / f"frame_{k:04d}.png", eng.rgb8())
    print(f"{args.frames} frames written to {out}")
    return 0


def cli_bench(args) -> int:
    if args.weights:
        rule, cfg = load_rule(args.weights)
        config_id = args.weights
    else:
        cfg = preset(args.config, frame_interval=args.frame_interval)
        rule = None
        config_id = args.config
    h, w = args.size
    report = run_bench(cfg, rule=rule, h=h, w=w, config_id=config_id,
                       warmup=args.warmup, steps=args.steps, threads=args.threads)
    print(report_record(report))
    print(report_table(report))
    return 0


def cli_export_field(args) -> int:
    name = args.field.lower()
    if name not in FIELD_NAMES:
        print(f"unknown field {args.field!r}; valid names: {', '.join(FIELD_NAMES)}",
              file=sys.stderr)
        return 2
    h, w = args.size
    field = generate_field(FieldKind(name), h, w)
    wrote = []
    if args.out_png:
        save_image(args.out_png, colorize_flow(field))
        wrote.append(args.out_png)
    if args.out_raw:
        write_field_raw(field, args.out_raw)
        wrote.append(args.out_raw)
    if not wrote:
        print("nothing to write: pass --out-png and/or --out-raw", file=sys.stderr)
        return 2
    print("wrote " + ", ".join(str(x) for x in wrote))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cli_train,
        "synthesize": cli_synthesize,
        "bench": cli_bench,
        "export-field": cli_export_field,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
