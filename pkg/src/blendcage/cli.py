"""Operator command line: dataset generation, training, rendering, evaluation.

Exit codes: 0 success, 2 config error, 3 data/IO error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import apply_overrides, echo_config, load_config
from .errors import (ConfigError, CorruptFile, DataError, NonFiniteLoss, SolverDiverged,
                     VersionMismatch)
from .images import write_ppm
from .scenes import load_dataset, make_camera_rig
from .training import checkpoint_load

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None, help="YAML config file")
    p.add_argument("--out", type=str, default=None, help="output directory override")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument(
        "--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
        help="override one config value (dotted key), repeatable",
    )


def _resolve_config(args) -> dict:
    config = load_config(args.config)
    config = apply_overrides(config, args.sets)
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def cmd_gen_data(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out or config["paths"]["dataset"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(config, out)
    ds = pipeline.gen_data(config, out)
    print(f"dataset: {len(ds.frames)} frames, {len(ds.cameras)} cameras -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_config(args)
    run_dir = Path(args.out or config["paths"]["run"])
    run_dir.mkdir(parents=True, exist_ok=True)
    echo_config(config, run_dir)
    dataset = load_dataset(config["paths"]["dataset"])
    pipeline.train_model(config, dataset, run_dir)
    print(f"trained -> {run_dir / 'model.bc'}")
    return EXIT_OK


def cmd_render(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out or config["paths"]["run"]) / "renders"
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(config["paths"]["dataset"])
    model, _, _, meta = checkpoint_load(args.checkpoint)
    if args.orbit:
        cams = make_camera_rig(
            dataset.scene, ring_count=args.orbit, elevated_count=0,
            image_size=config["cameras"]["image_size"], focal=config["cameras"]["focal"],
            ring_radius=config["cameras"]["ring_radius"],
        )
        for i, cam in enumerate(cams):
            img = pipeline.render_expression(model, meta, dataset, config, args.e, cam)
            write_ppm(out / f"orbit_e{args.e:.4f}_{i:03d}.ppm", img)
        print(f"wrote {len(cams)} orbit frames -> {out}")
    else:
        cam = dataset.cameras[args.camera]
        img = pipeline.render_expression(model, meta, dataset, config, args.e, cam)
        path = out / f"render_e{args.e:.4f}_cam{args.camera:03d}.ppm"
        write_ppm(path, img)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out or config["paths"]["run"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(config["paths"]["dataset"])
    model, _, _, meta = checkpoint_load(args.checkpoint)
    report = pipeline.evaluate(model, meta, dataset, config, split=args.split)
    path = out / f"metrics_{args.split}.txt"
    path.write_text(report.to_text())
    print(report.to_text(), end="")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_inspect_weights(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out or config["paths"]["run"]) / "weights"
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(config["paths"]["dataset"])
    model, _, _, _ = checkpoint_load(args.checkpoint)
    cam = dataset.cameras[args.camera]
    raw, smoothed = pipeline.inspect_weights(model, dataset, config, args.e, cam)
    p1 = out / f"weights_e{args.e:.4f}_cam{args.camera:03d}_raw.ppm"
    p2 = out / f"weights_e{args.e:.4f}_cam{args.camera:03d}_smoothed.ppm"
    write_ppm(p1, raw)
    write_ppm(p2, smoothed)
    print(f"wrote {p1}\nwrote {p2}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blendcage",
        description="Example-driven volumetric modeling with corrective blend fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the ground-truth dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render an expression from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--e", type=float, required=True, help="expression code in [0, 1]")
    p.add_argument("--camera", type=int, default=0, help="dataset camera id")
    p.add_argument("--orbit", type=int, default=0, help="render N orbit cameras instead")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="eval", choices=["train", "eval"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-weights", help="visualize blend weights before/after smoothing")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--e", type=float, required=True)
    p.add_argument("--camera", type=int, default=0)
    p.set_defaults(func=cmd_inspect_weights)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, VersionMismatch, CorruptFile, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, SolverDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
