"""Render run records and evaluation results to CSV tables and figures.

The evaluation table always has the four columns dataset,dice,hd,count.
Figures are written with the Agg backend so reporting works on headless
machines.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import MetricReport

EVAL_COLUMNS = ("dataset", "dice", "hd", "count")


def report_to_row(report: MetricReport) -> dict:
    return {
        "dataset": report.dataset,
        "dice": report.mean_dice,
        "hd": report.mean_hausdorff,
        "count": report.count,
    }


def write_eval_csv(reports: dict[str, MetricReport] | list[dict], path: str | Path) -> Path:
    """Evaluation table, one row per dataset: dataset,dice,hd,count."""
    if isinstance(reports, dict):
        rows = [report_to_row(r) for r in reports.values()]
    else:
        rows = reports
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["dataset"],
                    f"{row['dice']:.2f}",
                    "nan" if math.isnan(row["hd"]) else f"{row['hd']:.2f}",
                    row["count"],
                ]
            )
    return path


def eval_results_dict(reports: dict[str, MetricReport]) -> dict:
    """JSON-friendly form stored inside run records."""
    out = {}
    for name, rep in reports.items():
        out[name] = {
            "dice": rep.mean_dice,
            "hd": rep.mean_hausdorff,
            "count": rep.count,
            "skipped_hd": rep.skipped_hausdorff,
            "skipped_prompts": rep.skipped_prompts,
        }
    return out


_RUN_COLUMNS = (
    "run",
    "regime",
    "prompt_mode",
    "seed",
    "cnn",
    "cba",
    "feature_adapters",
    "position_adapter",
    "trainable_params",
    "steps",
    "final_loss",
    "train_dice",
    "wall_seconds",
)


def write_runs_csv(records: list[tuple[str, dict]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RUN_COLUMNS)
        for name, rec in records:
            ab = rec.get("ablation", {})
            writer.writerow(
                [
                    name,
                    rec.get("regime", ""),
                    rec.get("prompt_mode", ""),
                    rec.get("seed", ""),
                    int(ab.get("cnn_branch", True)),
                    int(ab.get("cba", True)),
                    int(ab.get("feature_adapters", True)),
                    int(ab.get("position_adapter", True)),
                    rec.get("trainable_params", 0),
                    rec.get("steps", 0),
                    f"{rec.get('final_loss', float('nan')):.4f}",
                    f"{rec.get('train_dice', float('nan')):.2f}",
                    f"{rec.get('wall_seconds', 0.0):.1f}",
                ]
            )
    return path


def plot_loss_curves(records: list[tuple[str, dict]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, rec in records:
        losses = rec.get("loss_history", [])
        if losses:
            ax.plot(range(1, len(losses) + 1), losses, label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    if records:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_dice_history(records: list[tuple[str, dict]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, rec in records:
        hist = rec.get("dice_history", [])
        if hist:
            steps = [h[0] for h in hist]
            dice = [h[1] for h in hist]
            ax.plot(steps, dice, marker="o", markersize=3, label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("train dice")
    ax.set_ylim(0, 100)
    ax.set_title("training-set dice")
    if records:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_eval_dice(records: list[tuple[str, dict]], path: str | Path) -> Path | None:
    """Grouped bars of evaluation dice per dataset; None when nothing to plot."""
    with_eval = [(n, r) for n, r in records if r.get("eval_results")]
    if not with_eval:
        return None
    datasets = sorted({d for _, r in with_eval for d in r["eval_results"]})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    width = 0.8 / len(with_eval)
    for j, (name, rec) in enumerate(with_eval):
        xs = [i + j * width for i in range(len(datasets))]
        ys = [rec["eval_results"].get(d, {}).get("dice", float("nan")) for d in datasets]
        ax.bar(xs, ys, width=width, label=name)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(datasets))])
    ax.set_xticklabels(datasets, rotation=20, ha="right")
    ax.set_ylabel("dice")
    ax.set_ylim(0, 100)
    ax.set_title("evaluation dice by dataset")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_report(runs_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Collect every run.json under runs_dir into tables and figures."""
    runs_dir = Path(runs_dir)
    out_dir = Path(out_dir) if out_dir is not None else runs_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for rec_path in sorted(runs_dir.rglob("run.json")):
        rel = rec_path.parent.relative_to(runs_dir)
        name = str(rel) if str(rel) != "." else rec_path.parent.name
        records.append((name, json.loads(rec_path.read_text())))
    if not records:
        raise FileNotFoundError(f"no run.json files found under {runs_dir}")

    written = [write_runs_csv(records, out_dir / "runs.csv")]
    written.append(plot_loss_curves(records, out_dir / "loss_curves.png"))
    written.append(plot_dice_history(records, out_dir / "train_dice.png"))
    eval_fig = plot_eval_dice(records, out_dir / "eval_dice.png")
    if eval_fig is not None:
        written.append(eval_fig)
    for name, rec in records:
        if rec.get("eval_results"):
            rows = [
                {"dataset": d, "dice": v["dice"], "hd": v["hd"], "count": v["count"]}
                for d, v in sorted(rec["eval_results"].items())
            ]
            safe = name.replace("/", "_")
            written.append(write_eval_csv(rows, out_dir / f"eval_{safe}.csv"))
    return written
