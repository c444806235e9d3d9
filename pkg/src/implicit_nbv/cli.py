"""Command-line entry point: run, compare, ablate, mesh, render."""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

from .field import load_field
from .geometry import CameraIntrinsics, ViewManifold, spherical_to_pose
from .loop import ABLATIONS, PLANNERS, RunConfig, load_config, run_ablation, run_active_loop, run_comparison
from .meshing import export_ply, marching_cubes
from .sensor import write_depth, write_ppm
from .supervision import render_image


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [run], [train], [nbv], [field] sections")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--scene", help="builtin scene name or scene INI path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--views", type=int, help="number of views (rounds)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics for bit-identical outputs")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    updates = {}
    for flag, key in (("seed", "seed"), ("scene", "scene"), ("out", "out"), ("views", "max_views")):
        val = getattr(args, flag, None)
        if val is not None:
            updates[key] = val
    if getattr(args, "method", None):
        updates["method"] = args.method
    if args.deterministic:
        updates["deterministic"] = True
    return dataclasses.replace(cfg, **updates)


def _seeds(text: str | None, default: int) -> list[int]:
    if not text:
        return [default]
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="implicit-nbv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one active reconstruction run")
    _common(p)
    p.add_argument("--method", choices=PLANNERS)
    p.add_argument("--resume", type=int, metavar="ROUND", help="resume from the checkpoint of this round")

    p = sub.add_parser("compare", help="planners x seeds with an aggregate CSV")
    _common(p)
    p.add_argument("--method", action="append", help="planner (repeatable; label=planner allowed)")
    p.add_argument("--seeds", help="e.g. 0-4 or 0,2,5")

    p = sub.add_parser("ablate", help="paired with/without runs")
    _common(p)
    p.add_argument("kind", choices=ABLATIONS)
    p.add_argument("--method", choices=PLANNERS)
    p.add_argument("--seeds", help="e.g. 0-4 or 0,2,5")

    p = sub.add_parser("mesh", help="field checkpoint to PLY")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="output .ply path")
    p.add_argument("--resolution", type=int, default=128)

    p = sub.add_parser("render", help="field checkpoint and view to colour/depth images")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--azimuth", type=float, default=0.0, help="degrees")
    p.add_argument("--elevation", type=float, default=20.0, help="degrees")
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--focal-ratio", type=float, default=2.5)
    p.add_argument("--samples", type=int, default=128)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log = lambda msg: print(msg, flush=True)  # noqa: E731
    try:
        if args.command == "run":
            cfg = _config(args)
            res = run_active_loop(cfg, resume_round=args.resume, log=log)
            print(f"wrote {res.out}")
        elif args.command == "compare":
            cfg = _config(args)
            methods = args.method or ["optimized", "random"]
            path = run_comparison(cfg, methods, _seeds(args.seeds, cfg.seed), cfg.out, log=log)
            print(f"wrote {path}")
        elif args.command == "ablate":
            cfg = _config(args)
            path = run_ablation(args.kind, cfg, _seeds(args.seeds, cfg.seed), cfg.out, log=log)
            print(f"wrote {path}")
        elif args.command == "mesh":
            fld = load_field(args.checkpoint)
            mesh = marching_cubes(fld, args.resolution)
            export_ply(mesh, args.out)
            print(f"wrote {args.out}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
        elif args.command == "render":
            fld = load_field(args.checkpoint)
            view = ViewManifold(args.radius, elev_min=-math.pi / 2 + 1e-3, elev_max=math.pi / 2 - 1e-3).view(
                math.radians(args.azimuth), math.radians(args.elevation)
            )
            intr = CameraIntrinsics.square(args.size, args.focal_ratio)
            color, depth = render_image(fld, spherical_to_pose(view), intr, args.samples)
            prefix = Path(args.out)
            write_ppm(prefix.with_suffix(".ppm"), color)
            write_depth(prefix.with_suffix(".depth"), depth)
            print(f"wrote {prefix.with_suffix('.ppm')} and {prefix.with_suffix('.depth')}")
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
