"""Command-line front door: synth, run, eval, export.

Exit codes: 0 success, 1 input/validation error, 2 mid-run failure. The
OBJMAP_LOG environment variable sets the log level (DEBUG, INFO, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import report as report_mod
from .errors import ObjmapError, PipelineError, ValidationError
from .frameio import export_inventory, save_point_cloud
from .geometry import PointCloud
from .objectmap import generate_map, load_map_state, save_map_state
from .pipeline import PipelineConfig, run_sequence
from .synth import (GroundTruth, generate_dataset, scene_spec_from_dict,
                    score_inventory)

log = logging.getLogger("objmap")

# Stable per-class colors for exported object clouds.
_PALETTE = np.array([
    [102, 194, 255], [255, 128, 164], [221, 64, 64], [64, 88, 221],
    [96, 200, 96], [230, 176, 48], [160, 96, 200], [200, 200, 80],
], dtype=np.uint8)


def _setup_logging():
    level = os.environ.get("OBJMAP_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _resolve_scene_path(raw: str) -> Path:
    path = Path(raw)
    if path.exists():
        return path
    packaged = resources.files("objmap") / "scenes" / f"{raw}.json"
    if packaged.is_file():
        return Path(str(packaged))
    raise ValidationError(f"scene spec {raw!r} not found "
                          f"(no such file, and no bundled scene of that name)")


def _emit(payload: dict, as_json: bool, lines) -> None:
    if as_json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


def cmd_synth(args) -> int:
    scene_path = _resolve_scene_path(args.scene_spec)
    with open(scene_path) as fh:
        spec_dict = json.load(fh)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    scene = scene_spec_from_dict(spec_dict)
    out_dir = Path(args.out)
    truth = generate_dataset(scene, out_dir)
    with open(out_dir / "scene.json", "w") as fh:
        json.dump(spec_dict, fh, indent=2, sort_keys=True)
        fh.write("\n")
    n_frames = len(truth.frames)
    payload = {
        "dataset": str(out_dir),
        "frames": n_frames,
        "objects": len(truth.objects),
        "classes": truth.classes,
    }
    _emit(payload, args.json, [
        f"dataset written to {out_dir}",
        f"{n_frames} frames, {len(truth.objects)} objects, "
        f"classes: {', '.join(truth.classes)}",
    ])
    return 0


def _export_clouds(semantic_map, out_dir: Path, objects_only: bool,
                   object_resolution: float, nonobject_resolution: float):
    generated = generate_map(semantic_map, object_resolution,
                             nonobject_resolution)
    colors = _PALETTE[generated.object_class_ids % len(_PALETTE)] \
        if len(generated.objects) else None
    obj_cloud = PointCloud(generated.objects.points, colors=colors)
    save_point_cloud(out_dir / "objects.ply", obj_cloud, extra_attrs={
        "class_id": generated.object_class_ids,
        "object_id": generated.object_ids,
    })
    written = [out_dir / "objects.ply"]
    if not objects_only:
        save_point_cloud(out_dir / "nonobjects.ply", generated.nonobjects)
        written.append(out_dir / "nonobjects.ply")
    return generated, written


def cmd_run(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), "ransac_seed": args.seed})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config_resolved.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    t0 = time.perf_counter()
    semantic_map, reports = run_sequence(args.dataset_dir, cfg)
    elapsed = time.perf_counter() - t0

    export_inventory(semantic_map, out_dir / "inventory.json")
    _export_clouds(semantic_map, out_dir, objects_only=False,
                   object_resolution=cfg.object_resolution,
                   nonobject_resolution=cfg.nonobject_resolution)
    save_map_state(semantic_map, out_dir / "map_state")
    report_mod.write_keyframe_csv(reports, out_dir / "keyframe_reports.csv")
    report_mod.render_run_figures(reports, out_dir / "figures")

    payload = {
        "keyframes": len(reports),
        "landmarks": len(semantic_map.landmarks),
        "matched": sum(r.matched for r in reports),
        "new_objects": sum(r.new_objects for r in reports),
        "skipped": sum(r.skipped for r in reports),
        "elapsed_s": round(elapsed, 3),
        "out": str(out_dir),
    }
    _emit(payload, args.json, [
        f"processed {payload['keyframes']} keyframes in {elapsed:.1f} s",
        f"{payload['landmarks']} landmarks "
        f"({payload['matched']} matches, {payload['new_objects']} inserts, "
        f"{payload['skipped']} skipped)",
        f"artifacts in {out_dir}",
    ])
    return 0


def cmd_eval(args) -> int:
    out_dir = Path(args.out_dir)
    inventory_path = out_dir / "inventory.json"
    if not inventory_path.exists():
        raise ValidationError(f"no inventory at {inventory_path}")
    gt_path = Path(args.ground_truth)
    if not gt_path.exists():
        raise ValidationError(f"no ground truth file at {gt_path}")
    with open(inventory_path) as fh:
        inventory = json.load(fh)
    with open(gt_path) as fh:
        truth = GroundTruth.from_json(json.load(fh))

    rows = score_inventory(inventory["objects"], truth,
                           max_centroid_dist=args.max_dist)
    report_mod.write_eval_csv(rows, out_dir / "eval.csv")
    report_mod.render_eval_figure(rows, out_dir / "figures" / "eval_counts.png")

    payload = {
        "rows": [
            {"class": r.class_name, "true_pos": r.true_pos,
             "false_pos": r.false_pos, "false_neg": r.false_neg}
            for r in rows
        ],
        "total": {
            "true_pos": sum(r.true_pos for r in rows),
            "false_pos": sum(r.false_pos for r in rows),
            "false_neg": sum(r.false_neg for r in rows),
        },
    }
    _emit(payload, args.json, [report_mod.format_eval_table(rows)])
    return 0


def cmd_export(args) -> int:
    out_dir = Path(args.out_dir)
    state_dir = out_dir / "map_state"
    if not state_dir.exists():
        raise ValidationError(f"no saved map state under {out_dir}")
    semantic_map = load_map_state(state_dir)
    target = Path(args.out) if args.out else out_dir
    target.mkdir(parents=True, exist_ok=True)
    generated, written = _export_clouds(
        semantic_map, target, objects_only=args.objects_only,
        object_resolution=args.object_resolution,
        nonobject_resolution=args.nonobject_resolution)
    payload = {
        "object_points": len(generated.objects),
        "nonobject_points": 0 if args.objects_only else len(generated.nonobjects),
        "files": [str(p) for p in written],
    }
    _emit(payload, args.json, [
        f"{payload['object_points']} object points, "
        f"{payload['nonobject_points']} non-object points",
        *(f"wrote {p}" for p in written),
    ])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="objmap",
        description="Object-oriented semantic mapping over RGB-D keyframes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="render a synthetic dataset")
    p_synth.add_argument("scene_spec",
                         help="scene JSON path, or the name of a bundled scene")
    p_synth.add_argument("--out", required=True, help="dataset output directory")
    p_synth.add_argument("--seed", type=int, default=None,
                         help="override the scene RNG seed")
    p_synth.add_argument("--json", action="store_true",
                         help="machine-readable summary")
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run the mapping pipeline on a dataset")
    p_run.add_argument("dataset_dir")
    p_run.add_argument("--config", default=None, help="pipeline config JSON")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the RANSAC seed")
    p_run.add_argument("--json", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="score a run against ground truth")
    p_eval.add_argument("out_dir", help="directory written by `objmap run`")
    p_eval.add_argument("ground_truth", help="ground_truth.json from `objmap synth`")
    p_eval.add_argument("--max-dist", type=float, default=0.25,
                        help="centroid match cap in meters")
    p_eval.add_argument("--json", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_export = sub.add_parser("export", help="re-emit map PLYs from a saved run")
    p_export.add_argument("out_dir", help="directory written by `objmap run`")
    group = p_export.add_mutually_exclusive_group()
    group.add_argument("--objects-only", action="store_true")
    group.add_argument("--full", action="store_true", default=True)
    p_export.add_argument("--out", default=None,
                          help="target directory (default: out_dir)")
    p_export.add_argument("--object-resolution", type=float, default=0.005)
    p_export.add_argument("--nonobject-resolution", type=float, default=0.01)
    p_export.add_argument("--json", action="store_true")
    p_export.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ObjmapError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
