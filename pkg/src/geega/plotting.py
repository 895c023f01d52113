"""Figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)


def cosine_grid(records, pair):
    """[batch x epoch] cosine matrix for one pair; NaN where a batch is missing."""
    cells = defaultdict(dict)
    for r in records:
        if r.pair == pair:
            cells[r.epoch][r.batch] = r.cosine
    if not cells:
        return np.zeros((0, 0))
    epochs = sorted(cells)
    n_batch = 1 + max(b for e in epochs for b in cells[e])
    grid = np.full((n_batch, len(epochs)), np.nan)
    for j, e in enumerate(epochs):
        for b, c in cells[e].items():
            grid[b, j] = c
    return grid


def conflict_heatmap(records, path, title=None):
    """Cosine between the fused-domain and per-domain gradients, blue < 0 < red."""
    pairs = sorted({r.pair for r in records})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(pairs), 1, figsize=(6, 1.8 * len(pairs)), squeeze=False)
        im = None
        for ax, pair in zip(axes[:, 0], pairs):
            im = ax.imshow(cosine_grid(records, pair), aspect="auto", cmap="bwr", vmin=-1, vmax=1,
                           interpolation="nearest", origin="lower")
            ax.set_ylabel("batch")
            ax.set_title(pair)
        axes[-1, 0].set_xlabel("epoch")
        if im is not None:
            fig.colorbar(im, ax=axes[:, 0].tolist(), label="cosine")
        if title:
            fig.suptitle(title)
        _save(fig, path)


def conflict_fraction_plot(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        for pair, by_epoch in report.items():
            ep = sorted(by_epoch)
            ax.plot(ep, [by_epoch[e] for e in ep], marker="o", ms=3, label=pair)
        ax.set_xlabel("epoch")
        ax.set_ylabel("conflicting batches")
        ax.set_ylim(-0.05, 1.05)
        ax.legend(frameon=False)
        _save(fig, path)


def loss_curves(epoch_records, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        terms = [k for k in epoch_records[0]["train"] if k != "total"]
        ep = [r["epoch"] for r in epoch_records]
        for t in terms:
            ax.plot(ep, [r["train"][t] for r in epoch_records], label=t)
        ax.plot(ep, [r["val_loss"] for r in epoch_records], "k--", label="val total")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=2)
        _save(fig, path)


def topomap_preview(maps, band_names, path, title=None):
    """One panel per band for a single [k x h x w] topography stack."""
    maps = np.asarray(maps)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, maps.shape[0], figsize=(1.6 * maps.shape[0], 1.8), squeeze=False)
        for ax, img, name in zip(axes[0], maps, band_names):
            ax.imshow(img, cmap="viridis", extent=(-1, 1, -1, 1))
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        _save(fig, path)
