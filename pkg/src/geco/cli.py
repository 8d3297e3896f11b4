"""Command line entry point: ``geco synth|train|train-zero-shot|eval|infer``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .config import GecoConfig
from .data import SynthConfig, load_dataset, save_dataset, synth_generate
from .errors import GecoError
from .model import load_checkpoint, save_checkpoint
from .pipeline import evaluate_dataset, fit, fit_zero_shot, infer, infer_zero_shot_two_pass

log = logging.getLogger("geco")

DETECTION_COLOUR = (255, 220, 0)
EXEMPLAR_COLOUR = (255, 40, 40)


def parse_exemplars(text: str) -> np.ndarray:
    """``"x1,y1,x2,y2;x1,y1,x2,y2"`` to an ``(k, 4)`` array."""
    boxes = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        vals = [float(v) for v in part.split(",")]
        if len(vals) != 4:
            raise argparse.ArgumentTypeError(f"exemplar {part!r} needs four numbers")
        boxes.append(vals)
    if not boxes:
        raise argparse.ArgumentTypeError("no exemplars given")
    return np.array(boxes)


def split_train_val(scenes, fraction=0.1):
    """Hold out the last ``fraction`` of scenes (at least one) for validation."""
    if len(scenes) < 2:
        raise GecoError("need at least two scenes to hold out a validation split")
    n_val = max(1, int(round(len(scenes) * fraction)))
    return scenes[:-n_val], scenes[-n_val:]


def draw_overlay(image: np.ndarray, boxes, exemplars=None, min_side: int = 384) -> Image.Image:
    """Detections, exemplars in a second colour, and the count in the top-left corner."""
    pil = Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8))
    zoom = max(1, int(np.ceil(min_side / max(pil.size))))
    if zoom > 1:
        pil = pil.resize((pil.width * zoom, pil.height * zoom), Image.NEAREST)
    draw = ImageDraw.Draw(pil)
    for b in boxes:
        draw.rectangle([v * zoom for v in b], outline=DETECTION_COLOUR, width=2)
    for b in [] if exemplars is None else exemplars:
        draw.rectangle([v * zoom for v in b], outline=EXEMPLAR_COLOUR, width=3)
    label = f"count: {len(boxes)}"
    left, top, right, bottom = draw.textbbox((6, 4), label)
    draw.rectangle([left - 4, top - 3, right + 4, bottom + 3], fill=(0, 0, 0))
    draw.text((6, 4), label, fill=(255, 255, 255))
    return pil


def cmd_synth(args):
    cfg = SynthConfig(n_images=args.n, size=args.size, max_objects=args.max_objects,
                      distractor_rate=args.distractors, k=args.k)
    scenes = synth_generate(cfg, args.seed)
    path = save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {path}")


def _load_config(args) -> GecoConfig:
    cfg = GecoConfig.load(args.config) if args.config else GecoConfig()
    for key in ("pretrain_epochs", "epochs", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def cmd_train(args):
    cfg = _load_config(args)
    scenes = load_dataset(args.data)
    if args.val:
        train, val = scenes, load_dataset(args.val)
    else:
        train, val = split_train_val(scenes)
    log.info("training on %d scenes, validating on %d", len(train), len(val))
    with _maybe_open(args.step_log) as step_log:
        model, history = fit(train, val, cfg, step_log=step_log)
    save_checkpoint(args.out, model, {"history": history.epochs, "best_epoch": history.best_epoch})
    print(f"best val MAE {history.best_val_mae:.3f} at epoch {history.best_epoch}; saved {args.out}")


def cmd_train_zero_shot(args):
    model = load_checkpoint(args.ckpt)
    cfg = model.cfg
    if args.epochs is not None:
        cfg.zero_shot_epochs = args.epochs
    scenes = load_dataset(args.data)
    if args.val:
        train, val = scenes, load_dataset(args.val)
    else:
        train, val = split_train_val(scenes)
    with _maybe_open(args.step_log) as step_log:
        model, history = fit_zero_shot(model, train, cfg, val, step_log=step_log)
    save_checkpoint(args.out, model, {"zero_shot_history": history.epochs})
    print(f"best zero-shot val MAE {history.best_val_mae:.3f}; saved {args.out}")


def cmd_eval(args):
    scenes = load_dataset(args.data)
    model = load_checkpoint(args.ckpt)
    report = evaluate_dataset(scenes, model, mode=args.mode,
                              two_pass=not args.single_pass)
    Path(args.report).write_text(report.to_json())
    print(f"MAE {report.mae:.3f}  RMSE {report.rmse:.3f}  AP {report.ap:.4f}  AP50 {report.ap50:.4f}")


def cmd_infer(args):
    model = load_checkpoint(args.ckpt)
    image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float64) / 255.0
    if args.zero_shot:
        exemplars = None
        result = infer_zero_shot_two_pass(model, image)
    else:
        if args.exemplars is None:
            raise GecoError("give --exemplars or --zero-shot")
        exemplars = args.exemplars
        result = infer(model, image, exemplars)
    boxes = [b.box.tolist() for b in result.boxes]
    if args.json:
        Path(args.json).write_text(json.dumps({
            "image": str(args.image),
            "count": result.count,
            "boxes": boxes,
            "scores": [b.score for b in result.boxes],
            "scale_factor": result.resize.scale_factor,
            "canvas": list(result.resize.canvas),
        }, indent=1))
    if args.overlay:
        draw_overlay(image, boxes, exemplars).save(args.overlay)
    print(result.count)


def _maybe_open(path):
    return open(path, "w") if path else contextlib.nullcontext()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geco", description="Low-shot counting by detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--max-objects", type=int, default=12)
    p.add_argument("--distractors", type=float, default=0.3, help="fraction of scenes with a distractor class")
    p.add_argument("--k", type=int, default=3, help="exemplars per scene")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="pretrain with the Gaussian loss, then train with the dense loss")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="validation dataset (default: last 10%% of --data)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--step-log", help="write one JSON record per optimiser step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-zero-shot", help="fit the zero-shot prototype on a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--step-log")
    p.set_defaults(func=cmd_train_zero_shot)

    p = sub.add_parser("eval", help="count and detection metrics on an annotated dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("few", "one", "zero"), default="few")
    p.add_argument("--single-pass", action="store_true", help="zero-shot without size re-estimation")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="count objects in one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--exemplars", type=parse_exemplars, help='"x1,y1,x2,y2;..." in pixels')
    p.add_argument("--zero-shot", action="store_true")
    p.add_argument("--overlay", help="PNG with boxes and count")
    p.add_argument("--json", help="write boxes, scores and count")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (GecoError, ValueError, FileNotFoundError) as exc:
        print(f"geco: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
