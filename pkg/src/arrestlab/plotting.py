"""Figures written next to the CSV outputs."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import TradeoffCurve, curve_eval  # noqa: E402


def _save(fig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp, dpi=120, metadata={"Software": None})
    plt.close(fig)
    os.replace(tmp, path)


def training_curves(reports: Sequence, path, title: str = "") -> None:
    """Loss, accuracies and NR switch rate per epoch."""
    epochs = [r.epoch for r in reports]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r.loss for r in reports], "o-", color="k")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")

    def series(attr):
        pts = [(r.epoch, getattr(r, attr)) for r in reports if getattr(r, attr) is not None]
        return zip(*pts) if pts else ((), ())

    for attr, label, style in (("standard_acc", "standard", "o-"), ("robust_acc", "PGD", "s-")):
        xs, ys = series(attr)
        if xs:
            ax_acc.plot(xs, ys, style, label=label)
    xs, ys = series("switch_rate")
    if xs:
        ax_acc.plot(xs, [100 * v for v in ys], "^--", label="NR switch %")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("percent")
    if ax_acc.lines:
        ax_acc.legend(frameon=False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def tradeoff(rows: Sequence[dict], curve: TradeoffCurve | None, path) -> None:
    """Scatter of (standard, robust) points with the tradeoff curve."""
    fig, ax = plt.subplots(figsize=(5, 4))
    xs = np.array([r["standard_acc"] for r in rows])
    ys = np.array([r["robust_acc"] for r in rows])
    colors = ["tab:blue" if r["ardist"] >= 0 else "tab:red" for r in rows]
    ax.scatter(xs, ys, c=colors, zorder=3)
    for r in rows:
        ax.annotate(r["label"], (r["standard_acc"], r["robust_acc"]), fontsize=7,
                    xytext=(3, 3), textcoords="offset points")
    if curve is not None:
        lo, hi = xs.min(), xs.max()
        pad = max(1.0, 0.1 * (hi - lo))
        grid = np.linspace(lo - pad, hi + pad, 200)
        ax.plot(grid, [curve_eval(curve, g) for g in grid], color="gray", lw=1)
    ax.set_xlabel("standard accuracy (%)")
    ax.set_ylabel("robust accuracy (%)")
    fig.tight_layout()
    _save(fig, path)
