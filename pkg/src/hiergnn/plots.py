"""Matplotlib figures for training reports and forecasts (files only, Agg backend)."""
from __future__ import annotations

import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import atomic_write_bytes  # noqa: E402
from .hierarchy import Hierarchy  # noqa: E402
from .training import TrainReport  # noqa: E402

__all__ = ["plot_training", "plot_forecasts", "plot_level_wape"]

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> str:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return os.fspath(path)


def plot_training(report: TrainReport, path) -> str:
    """Loss curves (left) and per-level validation WAPE (right)."""
    epochs = [r["epoch"] for r in report.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.8))
    ax1.plot(epochs, report.train_loss, marker="o", label="train")
    ax1.plot(epochs, report.val_loss, marker="s", label="validation")
    if report.best_epoch:
        ax1.axvline(report.best_epoch, color="grey", ls="--", lw=1, label=f"best epoch {report.best_epoch}")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss (scaled units)")
    ax1.legend()
    wapes = np.array([r["val_wape"] for r in report.rows]) if report.rows else np.zeros((0, 0))
    for j, name in enumerate(report.level_names):
        ax2.plot(epochs, wapes[:, j], marker=".", label=f"level {name}")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation WAPE")
    ax2.legend()
    fig.suptitle("training report")
    return _save(fig, path)


def plot_forecasts(hierarchy: Hierarchy, history: np.ndarray, forecast: np.ndarray, path,
                   actual: np.ndarray | None = None, context: int = 48) -> str:
    """One panel per level: the first node of that level, recent history plus forecast.

    ``history`` is ``(m, T)``, ``forecast`` and the optional ``actual`` are ``(m, H)``.
    """
    levels = hierarchy.levels()
    lvls = sorted(set(levels.tolist()))
    fig, axes = plt.subplots(len(lvls), 1, figsize=(9, 2.4 * len(lvls)), squeeze=False, constrained_layout=True)
    T = history.shape[1]
    H = forecast.shape[1]
    t_hist = np.arange(max(0, T - context), T)
    t_fc = np.arange(T, T + H)
    for ax, lvl in zip(axes[:, 0], lvls):
        i = int(np.flatnonzero(levels == lvl)[0])
        ax.plot(t_hist, history[i, t_hist], color="black", lw=1, label="history")
        if actual is not None:
            ax.plot(t_fc, actual[i], color="black", ls=":", marker="o", ms=3, label="actual")
        ax.plot(t_fc, forecast[i], color="tab:red", marker="s", ms=3, label="forecast")
        ax.set_title(f"level {lvl}: {hierarchy.node_ids[i]}", fontsize=9)
        ax.legend(fontsize=7, loc="upper left")
    axes[-1, 0].set_xlabel("time step")
    return _save(fig, path)


def plot_level_wape(table, path) -> str:
    """Bar chart of pooled WAPE per level from an EvalTable."""
    rows = [r for r in table.rows if r.scope == "level"]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([r.name for r in rows], [r.wape for r in rows], color="tab:blue")
    overall = table.overall().wape
    ax.axhline(overall, color="tab:red", ls="--", lw=1, label=f"overall {overall:.4f}")
    ax.set_xlabel("level")
    ax.set_ylabel(f"WAPE ({table.variant})")
    ax.legend()
    return _save(fig, path)
