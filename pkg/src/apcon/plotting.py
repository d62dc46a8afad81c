"""PNG figures next to the CSV outputs: predicted vs reference density and loss curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def density_figures(out_dir, pred, ref, t_grid, x_grid, samples, title: str = "") -> list[Path]:
    """One figure per sample: prediction, reference and pointwise error over (t, x)."""
    out_dir = Path(out_dir)
    paths = []
    extent = [x_grid[0], x_grid[-1], t_grid[0], t_grid[-1]]
    for s in samples:
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.6), constrained_layout=True)
        lo = min(pred[s].min(), ref[s].min())
        hi = max(pred[s].max(), ref[s].max())
        for ax, field, name in ((axes[0], pred[s], "prediction"), (axes[1], ref[s], "reference")):
            im = ax.imshow(field, origin="lower", aspect="auto", extent=extent, vmin=lo, vmax=hi, cmap="viridis")
            ax.set_title(name)
            ax.set_xlabel("x")
            ax.set_ylabel("t")
            fig.colorbar(im, ax=ax)
        im = axes[2].imshow(np.abs(pred[s] - ref[s]), origin="lower", aspect="auto", extent=extent, cmap="magma")
        axes[2].set_title("|error|")
        axes[2].set_xlabel("x")
        fig.colorbar(im, ax=axes[2])
        if title:
            fig.suptitle(f"{title}, test sample {s}")
        path = out_dir / f"density_sample{s}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def loss_figure(path, history) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    ax.semilogy(history.epoch, history.loss, label="train loss")
    err = np.asarray(history.test_error, float)
    ok = np.isfinite(err)
    if ok.any():
        ax.semilogy(np.asarray(history.epoch)[ok], err[ok], "o-", label="test rel. l2")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def ablation_figure(path, rows, title: str = "") -> Path:
    labels = [r.setting for r in rows]
    vals = [r.rel_l2 if isinstance(r.rel_l2, float) else np.nan for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    ax.bar(labels, vals)
    ax.set_ylabel("relative l2 error")
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
