"""Figures for run reports.  PNGs are written without a Software tag so the
bytes depend only on the plotted data."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def loss_curves(logs: dict, path) -> Path:
    """One panel per stage: training loss against step."""
    n = len(logs)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 2.8), squeeze=False)
    for ax, (stage, recs) in zip(axes[0], logs.items()):
        steps = [r["step"] for r in recs]
        ax.plot(steps, [r["loss"] for r in recs], lw=1.0)
        ax.set_title(stage, fontsize=9)
        ax.set_xlabel("step", fontsize=8)
        ax.tick_params(labelsize=7)
    axes[0][0].set_ylabel("loss", fontsize=8)
    return _save(fig, path)


def temperature_trajectory(logs: dict, path) -> Path:
    """Effective temperature over the concatenated stage steps."""
    fig, ax = plt.subplots(figsize=(5, 2.8))
    offset = 0
    for stage, recs in logs.items():
        if not recs or stage == "rerank_train":
            continue
        steps = np.array([r["step"] for r in recs]) + offset
        ax.plot(steps, [r["tau"] for r in recs], lw=1.0, label=stage)
        offset = int(steps[-1])
    ax.set_xlabel("step", fontsize=8)
    ax.set_ylabel("tau", fontsize=8)
    ax.legend(fontsize=7)
    ax.tick_params(labelsize=7)
    return _save(fig, path)


def stage_summary(summary: dict, path) -> Path:
    """Local and global averages for every evaluated model."""
    names = list(summary)
    local = [100 * (summary[n].local_avg or 0.0) for n in names]
    glob = [100 * (summary[n].global_avg or 0.0) for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names) + 1), 3.0))
    ax.bar(x - 0.2, local, 0.4, label="local")
    ax.bar(x + 0.2, glob, 0.4, label="global")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("avg recall (%)", fontsize=8)
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    return _save(fig, path)


def task_breakdown(report, path) -> Path:
    """Per-task metric for each scope in one report."""
    scopes = sorted({m.scope for m in report.metrics}, reverse=True)
    tasks = sorted({m.task_type for m in report.metrics})
    x = np.arange(len(tasks))
    w = 0.8 / max(1, len(scopes))
    fig, ax = plt.subplots(figsize=(5, 3.0))
    for i, sc in enumerate(scopes):
        vals = {m.task_type: 100 * m.value for m in report.metrics if m.scope == sc}
        ax.bar(x + (i - (len(scopes) - 1) / 2) * w, [vals.get(t, 0.0) for t in tasks], w, label=sc)
    ax.set_xticks(x)
    ax.set_xticklabels([str(t) for t in tasks], fontsize=7)
    ax.set_xlabel("task", fontsize=8)
    ax.set_ylabel("recall@k (%)", fontsize=8)
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    return _save(fig, path)


def ablation_bars(grid, path) -> Path:
    """Local average per cell, one bar group per seed."""
    cells = [c.name for c in grid.spec.cells]
    x = np.arange(len(cells))
    w = 0.8 / len(grid.seeds)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(cells) + 1), 3.0))
    for i, s in enumerate(grid.seeds):
        vals = [100 * grid.cells[s][c].local_avg for c in cells]
        ax.bar(x + (i - (len(grid.seeds) - 1) / 2) * w, vals, w, label=f"seed {s}")
    ax.set_xticks(x)
    ax.set_xticklabels(cells, fontsize=7)
    ax.set_ylabel("local avg (%)", fontsize=8)
    ax.set_title(grid.spec.name, fontsize=9)
    ax.legend(fontsize=7)
    return _save(fig, path)
