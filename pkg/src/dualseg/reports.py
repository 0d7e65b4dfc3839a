"""CSV and plot writers for run artifacts.

All writers are atomic (tmp file + rename) and CSVs are UTF-8 with a comma
header row.  Floats are written with ``repr`` so a re-run with the same seed
produces byte-identical files.
"""

from __future__ import annotations

import csv
import os
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    os.replace(tmp, path)


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def plot_losses(csv_path: str, png_path: str) -> None:
    """Per-epoch mean of every numeric loss column in a training log."""
    header, rows = read_csv(csv_path)
    idx = {name: i for i, name in enumerate(header)}
    series: dict[str, dict[int, list[float]]] = {}
    for row in rows:
        epoch = int(row[idx["epoch"]])
        for name in header:
            if name in ("epoch", "step", "skipped"):
                continue
            cell = row[idx[name]]
            if cell == "":
                continue
            series.setdefault(name, {}).setdefault(epoch, []).append(float(cell))
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, per_epoch in sorted(series.items()):
        epochs = sorted(per_epoch)
        means = [sum(per_epoch[e]) / len(per_epoch[e]) for e in epochs]
        ax.plot(epochs, means, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean per epoch")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save_fig(fig, png_path)


def plot_bars(labels: Sequence[str], values: Sequence[float], ylabel: str,
              png_path: str) -> None:
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    ax.bar(range(len(labels)), values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save_fig(fig, png_path)


def _save_fig(fig, png_path: str) -> None:
    os.makedirs(os.path.dirname(png_path) or ".", exist_ok=True)
    tmp = png_path + ".tmp"
    fig.savefig(tmp, format="png", dpi=100)
    plt.close(fig)
    os.replace(tmp, png_path)
