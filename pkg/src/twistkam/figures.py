"""Static PNG figures for CLI runs.

Rendering uses the Agg backend with PNG metadata stripped, so a figure is a
pure function of its data and reruns produce identical bytes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "savefig.bbox": "tight",
}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def line(path: Path, x, ys: dict, xlabel: str, ylabel: str, title: str = "", logy: bool = False,
         marker: str | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, y in ys.items():
            ax.plot(x, y, marker=marker, label=label)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(ys) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def scatter(path: Path, x, y, xlabel: str, ylabel: str, title: str = "", c=None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(x, y, s=4, c=c, cmap="viridis" if c is not None else None)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def heatmap(path: Path, values: np.ndarray, label: str, title: str = "") -> Path:
    """Values on a 2-torus grid, first index along x_1."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        im = ax.imshow(np.asarray(values).T, origin="lower", extent=(0, 1, 0, 1), cmap="viridis")
        fig.colorbar(im, ax=ax, label=label)
        ax.set_xlabel("x_1")
        ax.set_ylabel("x_2")
        ax.grid(False)
        if title:
            ax.set_title(title)
        return _save(fig, path)
