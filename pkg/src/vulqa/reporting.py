"""Delimited outputs and matplotlib figures written side by side."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import METRIC_COLUMNS, MetricReport  # noqa: E402


def write_tsv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return path


def metric_rows(reports: Mapping[str, MetricReport]) -> tuple[list[str], list[list]]:
    header = ["variant"] + [key for key, _ in METRIC_COLUMNS] + ["n", "skipped"]
    rows = [[name] + [getattr(r, key) for key, _ in METRIC_COLUMNS] + [r.n, r.skipped]
            for name, r in reports.items()]
    return header, rows


def plot_losses(series: Mapping[str, Sequence[float]], path, title: str = "training loss") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, losses in series.items():
        if len(losses):
            ax.plot(range(1, len(losses) + 1), losses, label=name, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_metric_bars(reports: Mapping[str, MetricReport], path, title: str = "generation metrics") -> Path:
    path = Path(path)
    names = list(reports)
    keys = [k for k, _ in METRIC_COLUMNS]
    labels = [lab for _, lab in METRIC_COLUMNS]
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(7.5, 3.8))
    for i, name in enumerate(names):
        vals = [getattr(reports[name], k) for k in keys]
        ax.bar([j + i * width for j in range(len(keys))], vals, width, label=name)
    ax.set_xticks([j + width * (len(names) - 1) / 2 for j in range(len(keys))])
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_classification(metrics: Mapping[str, float], path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    keys = ["accuracy", "precision", "recall", "f1"]
    ax.bar(keys, [metrics[k] for k in keys], color="#4477aa")
    ax.set_ylim(0, 1)
    ax.set_title("classification")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_metric_report(reports: Mapping[str, MetricReport], out_dir, stem: str = "metrics",
                        figures: bool = True) -> dict[str, str]:
    """TSV table + JSON (with per-row scores) + bar chart; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header, rows = metric_rows(reports)
    paths = {"tsv": str(write_tsv(out_dir / f"{stem}.tsv", header, rows))}
    js = out_dir / f"{stem}.json"
    js.write_text(json.dumps({k: r.to_json(include_rows=True) for k, r in reports.items()}, indent=2, sort_keys=True))
    paths["json"] = str(js)
    if figures:
        paths["figure"] = str(plot_metric_bars(reports, out_dir / f"{stem}.png"))
    return paths


def write_loss_report(series: Mapping[str, Sequence[float]], out_dir, stem: str = "loss",
                      figures: bool = True) -> dict[str, str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [[name, i + 1, float(v)] for name, losses in series.items() for i, v in enumerate(losses)]
    paths = {"tsv": str(write_tsv(out_dir / f"{stem}.tsv", ["series", "step", "loss"], rows))}
    if figures:
        paths["figure"] = str(plot_losses(series, out_dir / f"{stem}.png"))
    return paths
