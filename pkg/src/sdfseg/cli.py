"""Command-line front door.

Subcommands: synth | train | render | segment | eval | mesh.
Config precedence everywhere: command-line flag > config file > built-in
default.  Progress goes to stderr; machine-readable results only to the
files named by --out/--report.  Exit codes: 0 success, 2 usage or
validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import SdfSegError
from .threading_utils import set_threads

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _progress(msg: str):
    print(msg, file=sys.stderr, flush=True)


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdfseg",
        description="Self-supervised multi-view object segmentation via "
                    "hash-encoded SDF fields.",
        epilog="Option precedence: flag > config file > built-in default.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="seed threaded into all randomness")
        p.add_argument("--threads", type=int, default=None,
                       help="worker thread cap; 1 selects the bit-deterministic path")

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    p.add_argument("--spec", required=True, help="scene descriptor JSON")
    p.add_argument("--out", required=True, help="output scene directory")
    common(p)

    p = sub.add_parser("train", help="train the fields on a scene directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", default=None, help="training config JSON")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", default=None, help="loss history CSV path")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-rays", type=int, default=None)
    p.add_argument("--no-masks", action="store_true",
                   help="ignore coarse masks even when the scene has them")
    common(p)

    p = sub.add_parser("render", help="render one view through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out", required=True, help="output PNG")
    common(p)

    p = sub.add_parser("segment", help="write masks/foreground/background for all views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.5)
    common(p)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted alpha PNGs")
    p.add_argument("--gt", required=True, help="directory of ground-truth mask PNGs")
    p.add_argument("--report", required=True, help="output report JSON")
    p.add_argument("--threshold", type=float, default=0.5)
    common(p)

    p = sub.add_parser("mesh", help="extract the zero-level-set mesh")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--res", type=int, default=256)
    p.add_argument("--out", required=True, help="output OBJ path")
    common(p)
    return parser


def _require_file(path, what):
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")


def cmd_synth(args) -> int:
    from .synthetic import SynthSpec, generate, save_scene

    _require_file(args.spec, "scene descriptor")
    spec = SynthSpec.from_json(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    _progress(f"generating {spec.views} views of a {spec.primitive} "
              f"(seed {spec.seed})")
    bundle, gt = generate(spec)
    save_scene(args.out, spec, bundle, gt)
    spec.to_json(Path(args.out) / "descriptor.json")
    _progress(f"wrote scene to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .synthetic import load_scene_dir
    from .trainer import TrainConfig, train

    _require_file(args.scene, "scene directory")
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.config:
        _require_file(args.config, "training config")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.batch_rays is not None:
        overrides["batch_rays"] = args.batch_rays
    if args.no_masks:
        overrides["use_masks"] = False
    if overrides:
        config = replace(config, **overrides)
    scene = load_scene_dir(args.scene, with_masks=config.use_masks)
    _progress(f"training {config.iterations} iterations on "
              f"{len(scene.views)} views (seed {config.seed})")

    def report(state):
        if state.step % max(1, config.log_every * 5) == 0:
            row = state.history[-1]
            _progress(f"  step {row.step}: color={row.color:.5f} b={row.b:.1f}")
        return False

    train(scene, config, callback=report, checkpoint_path=args.out,
          history_path=args.history)
    _progress(f"wrote checkpoint to {args.out}")
    return 0


def _load_checkpoint(path):
    from .trainer import load_checkpoint

    _require_file(path, "checkpoint")
    return load_checkpoint(path)


def cmd_render(args) -> int:
    from . import pngio
    from .synthetic import load_scene_dir
    from .segmenter import segment_view

    ckpt = _load_checkpoint(args.ckpt)
    scene = load_scene_dir(args.scene)
    if not 0 <= args.view < len(scene.views):
        raise UsageError(f"view {args.view} out of range "
                         f"(scene has {len(scene.views)} views)")
    _progress(f"rendering view {args.view}")
    out = segment_view(ckpt, scene, args.view)
    pngio.write_rgb(args.out, out.composite_rgb)
    _progress(f"wrote {args.out}")
    return 0


def cmd_segment(args) -> int:
    from .synthetic import load_scene_dir
    from .segmenter import segment_view

    ckpt = _load_checkpoint(args.ckpt)
    scene = load_scene_dir(args.scene)
    fields = ckpt.fieldset()
    grids = ckpt.occupancy_grids()
    for vi, view in enumerate(scene.views):
        _progress(f"segmenting view {vi + 1}/{len(scene.views)}")
        out = segment_view(fields, scene, vi, threshold=args.threshold,
                           grids=grids, n_fg=ckpt.config.n_fg, n_bg=ckpt.config.n_bg)
        stem = Path(view.name).stem or f"view_{vi:03d}"
        out.save(args.out, stem)
    _progress(f"wrote segmentations to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from . import pngio
    from .metrics import evaluate

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    _require_file(pred_dir, "prediction directory")
    _require_file(gt_dir, "ground-truth directory")
    pred_files = sorted(p for p in pred_dir.iterdir() if p.suffix == ".png")
    gt_files = sorted(p for p in gt_dir.iterdir() if p.suffix == ".png")
    if len(pred_files) != len(gt_files):
        raise UsageError(f"image count mismatch: {len(pred_files)} predictions "
                         f"vs {len(gt_files)} ground-truth masks")
    preds = [pngio.read_gray01(p) for p in pred_files]
    gts = [pngio.read_mask(p).astype(np.float64) for p in gt_files]
    report = evaluate(preds, gts, threshold=args.threshold)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    report.to_json(args.report)
    _progress(report.to_table())
    _progress(f"wrote {args.report}")
    return 0


def cmd_mesh(args) -> int:
    from .segmenter import extract_mesh

    ckpt = _load_checkpoint(args.ckpt)
    if args.res < 8:
        raise UsageError("mesh resolution must be at least 8")
    _progress(f"marching cubes at resolution {args.res}")
    mesh = extract_mesh(ckpt, resolution=args.res)
    mesh.save_obj(args.out)
    _progress(f"wrote {len(mesh.vertices)} vertices / {len(mesh.faces)} faces "
              f"to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "mesh": cmd_mesh,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return USAGE_ERROR if e.code not in (0, None) else 0
    set_threads(getattr(args, "threads", None))
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        _progress(f"error: {e}")
        return USAGE_ERROR
    except (SdfSegError, ValueError, OSError) as e:
        _progress(f"error: {e}")
        return RUNTIME_ERROR


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
