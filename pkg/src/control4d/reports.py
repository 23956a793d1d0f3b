"""Run-report artifacts: JSON-lines, CSV, and rendered figures.

Every training command writes the same bundle into its output directory:
report.jsonl (one record per logging interval), report.csv (the same table
for spreadsheet tooling), and PNG figures of the loss curves and metric
snapshots.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from control4d.training import TrainReport

_SKIP_FIELDS = {"iteration", "phase", "level"}


def plot_loss_curves(report: TrainReport, path: Path | str) -> None:
    """One panel per numeric series in the report records."""
    series: dict[str, list[tuple[int, float]]] = {}
    for rec in report.records:
        for key, value in rec.items():
            if key in _SKIP_FIELDS or not isinstance(value, (int, float)):
                continue
            series.setdefault(key, []).append((rec["iteration"], float(value)))
    n = max(len(series), 1)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.2), squeeze=False)
    for ax, (name, points) in zip(axes[0], sorted(series.items())):
        xs, ys = zip(*points)
        ax.plot(xs, ys, lw=1.0)
        ax.set_title(name)
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    if not series:
        axes[0][0].set_title("no records")
    fig.suptitle(f"mode={report.mode} seed={report.seed}")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_metrics(metrics: dict, path: Path | str) -> None:
    """Bar chart of scalar metrics (psnr, flicker, sharpness, ...)."""
    items = [(k, v) for k, v in sorted(metrics.items()) if isinstance(v, (int, float))]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * max(len(items), 1), 3.2))
    if items:
        names, values = zip(*items)
        ax.bar(range(len(values)), values, color="#4878a8")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        for i, v in enumerate(values):
            ax.annotate(f"{v:.4g}", (i, v), ha="center", va="bottom", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_metrics(metrics: dict, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "metrics.json"
    path.write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    plot_metrics(metrics, out_dir / "figures" / "metrics.png")
    return path


def write_report(report: TrainReport, out_dir: Path | str) -> None:
    """The full bundle: JSONL + CSV + loss-curve figure."""
    out_dir = Path(out_dir)
    report.to_jsonl(out_dir / "report.jsonl")
    report.to_csv(out_dir / "report.csv")
    plot_loss_curves(report, out_dir / "figures" / "loss_curves.png")
