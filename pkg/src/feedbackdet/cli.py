"""Command-line entry point: ``feedbackdet <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import CLASS_NAMES, LEVELS, load_config


def cmd_train(args) -> int:
    from .train import train

    cfg = load_config(args.config)
    if args.warmup_steps is not None:
        cfg.warmup_steps = args.warmup_steps
    result = train(cfg, resume=args.resume, out_dir=args.out)
    print(f"saved {result.checkpoint} after {result.seconds:.0f}s")
    return 0


def cmd_eval(args) -> int:
    from .inference import evaluate

    out = args.out or str(Path(args.ckpt).parent)
    result = evaluate(args.ckpt, args.split, out_dir=out)
    print(json.dumps(result.metrics(), indent=2))
    return 0


def cmd_infer(args) -> int:
    from .inference import infer

    det = infer(args.ckpt, args.image, args.out)
    for box, score, label in zip(det.boxes, det.scores, det.labels):
        print(f"{CLASS_NAMES[int(label)]:>10s} {score:.3f} " + " ".join(f"{v:.1f}" for v in box))
    print(f"{len(det.scores)} detection(s); overlay written to {args.out}")
    return 0


def cmd_gradcam(args) -> int:
    from .data import Sample, resize_pad
    from .gradcam import grad_cam, overlay
    from .inference import read_image
    from .train import load_model, to_tensor

    model, _ = load_model(args.ckpt)
    image = read_image(args.image)
    sample = Sample(image, np.zeros((0, 4)), np.zeros((0,), dtype=np.int64), Path(args.image).stem)
    resized, _ = resize_pad(sample, tuple(model.cfg.image_size), model.cfg.stretch_resize)
    cam = grad_cam(model, to_tensor(resized.image)[None], CLASS_NAMES.index(args.cls), args.level)
    out = args.out or str(Path(args.image).with_suffix("")) + f"_cam_{args.cls}_P{args.level}.png"
    overlay(resized.image, cam.heatmap).save(out)
    np.save(Path(out).with_suffix(".npy"), cam.heatmap)
    print(f"CAM max {cam.heatmap.max():.3f}; overlay written to {out}")
    return 0


def cmd_synth(args) -> int:
    from .data import save_dataset, synth_ultrasound

    size = tuple(args.size) if args.size else (256, 320)
    path = save_dataset(synth_ultrasound(args.seed, args.n, size), args.out)
    print(f"wrote {args.n} images and {path}")
    return 0


def cmd_bench_fps(args) -> int:
    from .fps import fps_benchmark
    from .train import load_model

    model, _ = load_model(args.ckpt)
    h, w = model.cfg.image_size
    gen = torch.Generator().manual_seed(0)
    images = [torch.rand(1, 1, h, w, generator=gen) for _ in range(4)]
    report = fps_benchmark(lambda x: model.predict(x), images, warmup=args.warmup, iters=args.iters)
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def cmd_verify(args) -> int:
    from .harness import run_suite

    reports = run_suite(args.seed, args.trials, include_slow=not args.fast)
    for r in reports:
        print(r.to_json())
    return 0 if all(r.passed for r in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feedbackdet", description="Feature-feedback lesion detector")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", default=None, help="output directory (default: out_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="val")
    p.add_argument("--out", default=None, help="directory for metrics JSON and match CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="detect lesions in one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="overlay image path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcam", help="class activation map for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="cls", choices=CLASS_NAMES, required=True)
    p.add_argument("--level", type=int, choices=LEVELS, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("synth", help="write a synthetic ultrasound dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench-fps", help="single-image inference speed")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.set_defaults(func=cmd_bench_fps)

    p = sub.add_parser("verify", help="run the invariant suite; JSON lines on stdout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--fast", action="store_true", help="skip the full-model fixed-point check")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
