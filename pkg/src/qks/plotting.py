"""Figures written next to the CSV/JSON outputs of the CLI.

Everything renders through the Agg backend straight to files; nothing here
opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss(rows, path):
    """Training loss (log scale) and learning rate against step."""
    steps = np.array([r[0] for r in rows])
    lr = np.array([r[1] for r in rows])
    loss = np.array([r[2] for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, loss, lw=0.6, color="0.6", label="batch")
        if loss.size >= 50:
            k = 50
            smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
            ax.plot(steps[k - 1:], smooth, lw=1.2, color="C0", label="50-step mean")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        ax2 = ax.twinx()
        ax2.plot(steps, lr, color="C3", lw=0.8, ls="--")
        ax2.set_ylabel("learning rate", color="C3")
        ax2.set_yscale("log")
        return _save(fig, path)


def plot_sweep(rows, path):
    """Metric curves against the swept axis (one panel per swept variable
    that takes more than one value)."""
    rows = list(rows)
    axes_vars = [v for v in ("m", "L") if len({r[v] for r in rows}) > 1] or ["m"]
    with plt.rc_context(STYLE):
        fig, axs = plt.subplots(1, len(axes_vars), figsize=(4.2 * len(axes_vars), 3),
                                squeeze=False)
        for ax, var in zip(axs[0], axes_vars):
            other = "L" if var == "m" else "m"
            for oval in sorted({r[other] for r in rows}):
                sub = sorted((r for r in rows if r[other] == oval), key=lambda r: r[var])
                x = [r[var] for r in sub]
                for key, style in (("mAP", "o-"), ("F1@3", "s-"), ("F1@5", "^-"), ("AVG", "k--")):
                    lab = key if len({r[other] for r in rows}) == 1 else f"{key} ({other}={oval})"
                    ax.plot(x, [100 * r[key] for r in sub], style, ms=3, lw=1, label=lab)
            ax.set_xlabel(var)
            ax.set_ylabel("score (%)")
        axs[0][0].legend(frameon=False)
        return _save(fig, path)


def plot_preference_matrix(stats, path, label_names=None):
    mat = stats.matrix.astype(float)
    tot = mat.sum(axis=1, keepdims=True)
    share = np.divide(mat, tot, out=np.zeros_like(mat), where=tot > 0)
    with plt.rc_context(STYLE):
        h = max(2.5, 0.18 * len(stats.labels))
        fig, ax = plt.subplots(figsize=(4.5, h))
        im = ax.imshow(share, aspect="auto", cmap="viridis", vmin=0, vmax=1)
        ax.set_xlabel("query token")
        ax.set_ylabel("label")
        ax.set_xticks(range(mat.shape[1]))
        if label_names is not None and len(stats.labels) <= 60:
            ax.set_yticks(range(len(stats.labels)))
            ax.set_yticklabels([label_names[i] for i in stats.labels], fontsize=6)
        fig.colorbar(im, ax=ax, label="share of positives")
        return _save(fig, path)


def plot_token_histogram(stats, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.6))
        ax.bar(range(stats.histogram.size), stats.histogram, color="C0")
        ax.set_xlabel("query token")
        ax.set_ylabel("positive labels won")
        ax.set_xticks(range(stats.histogram.size))
        return _save(fig, path)


def plot_attention(grid, path, title=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3, 3))
        ax.imshow(grid, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.set_xticks([])
        ax.set_yticks([])
        if title:
            ax.set_title(title)
        return _save(fig, path)
