"""Figures for exported run series. Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
    "savefig.dpi": 120,
}

TASK_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def _color(task) -> str:
    try:
        return TASK_COLORS[int(task) % len(TASK_COLORS)]
    except ValueError:
        return "k"


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _boundaries(ax, steps):
    for s in steps:
        ax.axvline(s, color="0.6", lw=0.8, ls=":")


def per_task_lines(series: dict, ylabel: str, path: Path, title: str = "", boundaries=()) -> Path:
    """``series`` maps a task label to (steps, values)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for task, (s, v) in series.items():
            label = f"task {task}" if task != "all" else "mean"
            ax.plot(s, v, marker=".", ms=3, color=_color(task), label=label)
        _boundaries(ax, boundaries)
        ax.set_xlabel("optimizer step")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if series:
            ax.legend(loc="best")
        return _save(fig, path)


def stacked_panels(steps, panels: dict, path: Path, boundaries=()) -> Path:
    """One row per panel; each panel maps a line label to its values over ``steps``."""
    n = max(1, len(panels))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 1, sharex=True, figsize=(6.0, 1.8 * n + 0.6), squeeze=False)
        for ax, (ylabel, lines) in zip(axes[:, 0], panels.items()):
            for label, vals in lines.items():
                ax.plot(steps, vals, label=label)
            _boundaries(ax, boundaries)
            ax.set_ylabel(ylabel)
            if len(lines) > 1:
                ax.legend(loc="best")
        axes[-1, 0].set_xlabel("optimizer step")
        return _save(fig, path)
