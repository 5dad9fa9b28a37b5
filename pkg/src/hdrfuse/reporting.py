"""Figure rendering: metric bar charts and training-loss curves.

Uses the Agg backend so figures render to files in headless runs.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import METRIC_KEYS, EvalReport  # noqa: E402


def plot_metrics(report: EvalReport, out_dir) -> list[Path]:
    """One bar chart per metric: per-sample bars plus a mean line."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    names = [s["name"] for s in report.samples]
    summary = report.summary
    for key in METRIC_KEYS:
        values = [s[key] for s in report.samples]
        fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(names) + 2), 3.5))
        ax.bar(range(len(names)), values, color="#4878a8")
        if values:
            ax.axhline(summary[key], color="#c44e52", linestyle="--",
                       linewidth=1, label=f"mean {summary[key]:.4g}")
            ax.legend(loc="lower right", fontsize=8)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel(key)
        ax.set_title(key)
        fig.tight_layout()
        path = out_dir / f"{key}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_loss_curves(metrics_jsonl, out_path) -> Path:
    """Per-phase step-loss curves from a metrics.jsonl file."""
    phases: dict[str, tuple[list, list]] = {}
    for line in Path(metrics_jsonl).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "step" not in rec:
            continue
        loss = rec.get("loss", rec.get("total"))
        if loss is None:
            continue
        xs, ys = phases.setdefault(rec.get("phase", "train"), ([], []))
        xs.append(rec["step"])
        ys.append(loss)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for phase, (xs, ys) in phases.items():
        ax.plot(xs, ys, label=phase, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if phases:
        ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
