"""SVG figures for run reports and attention dumps."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "figure.dpi": 100,
    "svg.fonttype": "none",  # keep text as text
    "svg.hashsalt": "cpmt",  # stable element ids, so reruns give identical files
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def heatmap(path, matrix, title: str = "", xlabel: str = "", ylabel: str = "", vmin=0.0, vmax=1.0) -> None:
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with plt.rc_context(STYLE):
        h, w = m.shape
        fig, ax = plt.subplots(figsize=(min(2 + 0.25 * w, 12), min(1.5 + 0.25 * h, 10)))
        im = ax.imshow(m, aspect="auto", cmap="viridis", vmin=vmin, vmax=vmax, interpolation="nearest")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        ax.set(title=title, xlabel=xlabel, ylabel=ylabel)
        _save(fig, path)


def loss_curves(path, curves: dict[str, list[float]], ylabel: str = "training loss") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for name, ys in curves.items():
            ax.plot(np.arange(1, len(ys) + 1), ys, marker="o", markersize=2.5, linewidth=1.2, label=name)
        ax.set(xlabel="epoch", ylabel=ylabel)
        if len(curves) > 1:
            ax.legend()
        _save(fig, path)


def per_class_bars(path, class_names, values, errors=None, ylabel: str = "F1") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.5 + 0.9 * len(class_names), 3.2))
        x = np.arange(len(class_names))
        bars = ax.bar(x, values, yerr=errors, capsize=3, color="#4c72b0")
        ax.bar_label(bars, fmt="%.3f", fontsize=7)
        ax.set_xticks(x, class_names, rotation=20, ha="right")
        ax.set(ylabel=ylabel, ylim=(0, 1.05))
        _save(fig, path)
