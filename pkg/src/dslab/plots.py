"""Report figures rendered to PNG files with the non-interactive Agg backend."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402

# PNG metadata otherwise embeds the matplotlib version string
_SAVE = {"format": "png", "dpi": 100, "metadata": {"Software": None}}


def _save(fig, path: str | Path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, **_SAVE)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def loss_curves(curves: Mapping[str, Sequence[tuple[int, float]]], path: str | Path) -> None:
    """One line per training run: epoch against epoch-mean loss."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, points in curves.items():
        if points:
            xs, ys = zip(*points)
            ax.plot(xs, ys, marker="o", markersize=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title("training loss")
    if curves:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def ratio_search(rows: Sequence[tuple[float, float]], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if rows:
        rs, accs = zip(*rows)
        ax.plot(rs, [100 * a for a in accs], marker="o")
    ax.set_xlabel("sample ratio r")
    ax.set_ylabel("zero-shot top-1 (%)")
    ax.set_title("mask replacement ratio search")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def task_accuracy(rows: Mapping[str, Mapping[str, float | None]], tasks: Sequence[str], path: str | Path) -> None:
    """Grouped bars: one group per task, one bar per model row."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = list(rows)
    width = 0.8 / max(1, len(names))
    for k, name in enumerate(names):
        xs = [t + k * width for t in range(len(tasks))]
        ys = [100 * (rows[name].get(task) or 0.0) for task in tasks]
        ax.bar(xs, ys, width=width, label=name)
    ax.set_xticks([t + 0.4 - width / 2 for t in range(len(tasks))])
    ax.set_xticklabels(tasks, fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title("benchmark accuracy per task")
    if names:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
