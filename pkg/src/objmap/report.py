"""Run and evaluation reports: delimited tables plus rendered figures.

Every pipeline run writes a per-keyframe CSV and a pair of PNG charts
(stage timings, object counts); evaluation writes the tp/fp/fn table the
same way. Figures use the Agg backend so reports render headless.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .pipeline import KeyframeReport
from .synth import InventoryRow

_STAGES = ["normals", "supervoxels", "adjacency", "planes", "weights",
           "graph_cut", "binding", "association"]
_COUNTS = ["supervoxels", "edges", "planes", "segments", "detections",
           "assigned", "matched", "new_objects", "skipped"]


def write_keyframe_csv(reports: List[KeyframeReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["keyframe_id", *_COUNTS,
                         *(f"{s}_ms" for s in _STAGES), "total_ms"])
        for rep in reports:
            times = [rep.stage_ms.get(s, 0.0) for s in _STAGES]
            writer.writerow([
                rep.keyframe_id,
                *(getattr(rep, c) for c in _COUNTS),
                *(f"{t:.3f}" for t in times),
                f"{sum(times):.3f}",
            ])


def render_run_figures(reports: List[KeyframeReport], fig_dir) -> List[Path]:
    """Stage-timing and landmark-count charts for one run."""
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if not reports:
        return written
    kf = [r.keyframe_id for r in reports]

    fig, ax = plt.subplots(figsize=(8, 4.5))
    stacked = [[r.stage_ms.get(s, 0.0) for r in reports] for s in _STAGES]
    ax.stackplot(kf, stacked, labels=_STAGES)
    ax.set_xlabel("keyframe")
    ax.set_ylabel("stage time [ms]")
    ax.set_title("Per-keyframe stage timings")
    ax.legend(loc="upper right", fontsize=8, ncol=2)
    fig.tight_layout()
    path = fig_dir / "stage_times.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(8, 4.5))
    cumulative = []
    total = 0
    for r in reports:
        total += r.new_objects
        cumulative.append(total)
    ax.plot(kf, cumulative, marker="o", label="landmarks (cumulative)")
    ax.bar(kf, [r.matched for r in reports], alpha=0.5, label="matched")
    ax.bar(kf, [r.skipped for r in reports],
           bottom=[r.matched for r in reports], alpha=0.5, label="skipped")
    ax.set_xlabel("keyframe")
    ax.set_ylabel("count")
    ax.set_title("Detections fused per keyframe")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    path = fig_dir / "keyframe_counts.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def write_eval_csv(rows: List[InventoryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "true_pos", "false_pos", "false_neg"])
        for row in rows:
            writer.writerow([row.class_name, row.true_pos, row.false_pos,
                             row.false_neg])
        writer.writerow([
            "total",
            sum(r.true_pos for r in rows),
            sum(r.false_pos for r in rows),
            sum(r.false_neg for r in rows),
        ])


def render_eval_figure(rows: List[InventoryRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [r.class_name for r in rows]
    x = range(len(rows))
    width = 0.27
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([i - width for i in x], [r.true_pos for r in rows], width,
           label="true pos", color="#2a9d8f")
    ax.bar(list(x), [r.false_pos for r in rows], width,
           label="false pos", color="#e76f51")
    ax.bar([i + width for i in x], [r.false_neg for r in rows], width,
           label="false neg", color="#e9c46a")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("instances")
    ax.set_title("Mapped object inventory vs ground truth")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def format_eval_table(rows: List[InventoryRow]) -> str:
    widths = max([len("class")] + [len(r.class_name) for r in rows])
    lines = [f"{'class':<{widths}}  true_pos  false_pos  false_neg"]
    for r in rows:
        lines.append(f"{r.class_name:<{widths}}  {r.true_pos:>8}  "
                     f"{r.false_pos:>9}  {r.false_neg:>9}")
    lines.append(f"{'total':<{widths}}  {sum(r.true_pos for r in rows):>8}  "
                 f"{sum(r.false_pos for r in rows):>9}  "
                 f"{sum(r.false_neg for r in rows):>9}")
    return "\n".join(lines)
