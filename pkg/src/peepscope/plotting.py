"""Matplotlib report figures.

Figures are written with the Agg backend and without the ``Software`` PNG
metadata entry, so identical inputs give identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_METADATA = {"Software": None}

STYLE = {
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def _matrix_axes(ax, probs: np.ndarray, labels: Sequence[str], title: str) -> None:
    ax.imshow(probs, cmap="Greys", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    for i in range(probs.shape[0]):
        for j in range(probs.shape[1]):
            v = probs[i, j]
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=6,
                    color="white" if v > 0.5 else "black")


def plot_confusion(probs: np.ndarray, labels: Sequence[str], path: str | Path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.0), layout="constrained")
        _matrix_axes(ax, np.asarray(probs), labels, title)
        return _save(fig, path)


def plot_confusion_panels(panels: Mapping[str, np.ndarray], labels: Sequence[str], path: str | Path,
                          subtitle: Mapping[str, str] | None = None) -> Path:
    """Grid of confusion matrices, three per row (wheel-identification layout)."""
    names = list(panels)
    ncols = min(3, len(names))
    nrows = -(-len(names) // ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.0 * ncols, 2.9 * nrows), layout="constrained",
                                 squeeze=False)
        for ax, name in zip(axes.flat, names):
            title = name if subtitle is None else f"{name} ({subtitle[name]})"
            _matrix_axes(ax, np.asarray(panels[name]), labels, title)
        for ax in list(axes.flat)[len(names):]:
            ax.axis("off")
        return _save(fig, path)


def plot_stream_explanation(stream, trace, path: str | Path, threshold: float | None = None) -> Path:
    """Three bands: raw telemetry, anomaly score per window, peephole heatmap."""
    values = np.asarray(stream.values)
    index = np.asarray(stream.sample_index)
    with plt.rc_context(STYLE):
        fig, (ax_t, ax_s, ax_p) = plt.subplots(3, 1, figsize=(8.0, 6.0), sharex=True, layout="constrained",
                                               gridspec_kw={"height_ratios": [2.0, 1.0, 1.2]})
        for c in range(values.shape[1]):
            ax_t.plot(index, values[:, c], lw=0.5)
        ax_t.set_ylabel("telemetry")
        ax_s.semilogy(trace.origins, np.maximum(trace.scores, 1e-12), lw=0.7, color="k")
        if threshold is not None and np.isfinite(threshold):
            ax_s.axhline(threshold, color="r", lw=0.7, ls="--")
        ax_s.set_ylabel("score")
        step = trace.origins[1] - trace.origins[0] if len(trace) > 1 else 1
        extent = (trace.origins[0] - 0.5 * step, trace.origins[-1] + 0.5 * step, len(trace.vocabulary) - 0.5, -0.5)
        ax_p.imshow(trace.peepholes.T, aspect="auto", cmap="Greys", vmin=0.0, vmax=1.0, extent=extent,
                    interpolation="nearest")
        ax_p.set_yticks(range(len(trace.vocabulary)), trace.vocabulary)
        ax_p.set_xlabel("window origin (sample)")
        ax_p.set_ylabel("peephole")
        return _save(fig, path)


def plot_loss_history(epochs: Sequence[int], train_loss: Sequence[float], val_loss: Sequence[float],
                      path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8), layout="constrained")
        ax.semilogy(epochs, train_loss, label="train")
        ax.semilogy(epochs, val_loss, label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE")
        ax.legend()
        return _save(fig, path)


def plot_auc_table(rows: Sequence[tuple[str, str, float]], path: str | Path) -> Path:
    """Scenario x kind AUC grid as a shaded table."""
    scenarios = sorted({r[0] for r in rows})
    kinds = list(dict.fromkeys(r[1] for r in rows))
    grid = np.full((len(scenarios), len(kinds)), np.nan)
    for s, k, v in rows:
        grid[scenarios.index(s), kinds.index(k)] = v
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 1.6), layout="constrained")
        ax.imshow(grid, cmap="Greys", vmin=0.5, vmax=1.0)
        ax.set_xticks(range(len(kinds)), kinds)
        ax.set_yticks(range(len(scenarios)), [f"X'_{s}" for s in scenarios])
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", fontsize=7,
                        color="white" if grid[i, j] > 0.8 else "black")
        ax.set_title("AUC")
        return _save(fig, path)
