"""PNG figures for run outputs.

Figures are drawn on standalone ``Figure`` objects with the Agg canvas, so no
pyplot global state or display is involved.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STAGE_NAMES = {1: "primary", 2: "subsidiary", 3: "adversarial", 4: "refit"}
STAGE_COLORS = {1: "#1f77b4", 2: "#2ca02c", 3: "#d62728", 4: "#9467bd"}


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120, bbox_inches="tight")


def plot_metrics(records: Sequence[Mapping], path) -> None:
    """Losses and mean squared cosine per recorded epoch, shaded by stage."""
    fig = Figure(figsize=(8, 6))
    ax_loss, ax_cos = fig.subplots(2, 1, sharex=True)
    x = np.arange(len(records))
    for key, style in (("loss_primary", "-"), ("loss_subsidiary", "--")):
        y = [np.nan if r[key] is None else r[key] for r in records]
        ax_loss.plot(x, y, style, label=key)
    ax_cos.semilogy(x, [max(r["mean_sq_cosine"], 1e-16) for r in records], color="k")
    for ax in (ax_loss, ax_cos):
        start = 0
        for i in range(1, len(records) + 1):
            if i == len(records) or records[i]["stage"] != records[start]["stage"]:
                st = records[start]["stage"]
                ax.axvspan(start - 0.5, i - 0.5, color=STAGE_COLORS.get(st, "0.8"), alpha=0.08, lw=0)
                start = i
    ax_loss.set_ylabel("cross entropy")
    ax_loss.legend(frameon=False)
    ax_cos.set_ylabel("mean CS$^2$")
    ax_cos.set_xlabel("epoch record")
    _save(fig, path)


def plot_table1(table: Mapping[str, Mapping[str, float]], path) -> None:
    """Grouped bars: argmax and argmin accuracy per adversarial variant."""
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    names = list(table)
    x = np.arange(len(names))
    w = 0.38
    ax.bar(x - w / 2, [table[n]["argmax"] for n in names], w, label="argmax")
    ax.bar(x + w / 2, [table[n]["argmin"] for n in names], w, label="argmin")
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_s2_curves(curves: Mapping[str, Sequence[tuple[int, float]]], n_classes: int, path) -> None:
    """Retrained-subsidiary loss curves with the constant-predictor level marked."""
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    for label, curve in curves.items():
        ep, loss = zip(*curve)
        ax.plot(ep, loss, marker=".", label=label)
    ax.axhline(math.log(n_classes), color="0.5", ls=":", label=f"ln {n_classes}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend(frameon=False)
    _save(fig, path)
