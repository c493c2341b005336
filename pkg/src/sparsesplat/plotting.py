"""Report figures written next to the CSV outputs of ``train``, ``eval`` and ``ablate``.

Everything renders through the Agg backend so it works on headless machines.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
COLUMN_WIDTH = 3.4  # inches
COLORS = ["#08589e", "#2b8cbe", "#4eb3d3", "#7bccc4", "#a8ddb5", "#e34a33"]

STYLE = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.family": "sans-serif",
    "font.size": 8,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
    "lines.markersize": 3,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}


def figsize(scale: float = 1.0, ratio: float = GOLDEN) -> tuple[float, float]:
    w = COLUMN_WIDTH * scale
    return (w, w * ratio)


def new_figure(nrows: int = 1, ncols: int = 1, scale: float = 1.0, ratio: float = GOLDEN):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=figsize(scale * ncols, ratio * nrows / ncols))
    return fig, ax


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def _column(rows, key):
    return np.array([float(r[key]) for r in rows])


def plot_metrics(rows: list[dict], path: str | Path, keys=("total", "rgb", "distortion", "normal", "fea", "df", "dn")):
    """Per-iteration loss curves (log scale) from metrics rows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.4))
        it = _column(rows, "iteration")
        for k in keys:
            y = _column(rows, k)
            if np.any(y > 0):
                ax.plot(it, np.where(y > 0, y, np.nan), label=k)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(ncol=2)
    return save(fig, path)


def plot_ablation(labels: list[str], values: list[float], path: str | Path, ylabel: str = "Chamfer average",
                  reference: str | None = None):
    """Bar chart of one ablation suite; ``reference`` names the bar drawn in the accent colour."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.0 + 0.1 * len(labels)))
        colors = [COLORS[-1] if lab == reference else COLORS[1] for lab in labels]
        x = np.arange(len(labels))
        ax.bar(x, values, color=colors, width=0.6)
        ax.set_xticks(x, labels, rotation=20, ha="right")
        ax.set_ylabel(ylabel)
        lo = min(values) if values else 0.0
        ax.set_ylim(bottom=max(0.0, 0.8 * lo))
        for xi, v in zip(x, values):
            ax.annotate(f"{v:.4g}", (xi, v), ha="center", va="bottom", fontsize=6)
    return save(fig, path)


def plot_depth_error(depth: np.ndarray, reference: np.ndarray, path: str | Path, clip: float | None = None):
    """Signed depth error map (rendered minus reference) with a diverging colour scale."""
    err = np.where((reference > 0) & np.isfinite(reference) & np.isfinite(depth), depth - reference, np.nan)
    lim = clip if clip is not None else float(np.nanpercentile(np.abs(err), 98)) if np.isfinite(err).any() else 1.0
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.0, 0.85))
        im = ax.imshow(err, cmap="RdBu_r", vmin=-lim, vmax=lim)
        ax.set_axis_off()
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="depth error")
    return save(fig, path)


def plot_chamfer(results: dict[str, tuple[float, float, float]], path: str | Path):
    """Grouped bars of accuracy / completeness / average per named mesh."""
    names = list(results)
    vals = np.array([results[n] for n in names]).reshape(len(names), 3)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.2))
        x = np.arange(len(names))
        for k, lab in enumerate(("accuracy", "completeness", "average")):
            ax.bar(x + (k - 1) * 0.25, vals[:, k], width=0.25, label=lab)
        ax.set_xticks(x, names)
        ax.set_ylabel("distance")
        ax.legend()
    return save(fig, path)
