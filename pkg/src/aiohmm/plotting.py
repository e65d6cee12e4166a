"""Report figures.  Uses the object-oriented matplotlib API with the Agg
canvas, so nothing touches pyplot's global state or needs a display."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .model import CLASSES

_SHORT = {"left_lane_change": "L lane", "right_lane_change": "R lane", "left_turn": "L turn",
          "right_turn": "R turn", "driving_straight": "straight"}
_META = {"Software": None}  # keep PNG bytes independent of the matplotlib version


def _save(fig: Figure, path):
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120, metadata=_META)


def plot_confusion(matrix, path, title: str = "Confusion matrix"):
    """Row-normalized heat map; rows are predicted, columns actual classes."""
    M = np.asarray(matrix, dtype=float)
    col = M.sum(axis=0, keepdims=True)
    frac = np.divide(M, col, out=np.zeros_like(M), where=col > 0)
    labels = [_SHORT[c.value] for c in CLASSES]
    fig = Figure(figsize=(5.2, 4.4))
    ax = fig.add_subplot()
    im = ax.imshow(frac, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            ax.text(j, i, f"{int(M[i, j])}", ha="center", va="center",
                    color="white" if frac[i, j] > 0.6 else "black", fontsize=8)
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("actual")
    ax.set_ylabel("predicted")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="fraction of actual")
    fig.tight_layout()
    _save(fig, path)


def plot_curve(xs: Sequence[float], ys: Sequence[float], path, xlabel: str, ylabel: str = "F1",
               title: str = ""):
    fig = Figure(figsize=(5.0, 3.4))
    ax = fig.add_subplot()
    ax.plot(xs, ys, marker="o", ms=3, lw=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
