"""Figures written next to the CSV outputs."""

import numpy as np

from .fileio import atomic_write


def _pyplot():
    # imported on first use so the CLI starts quickly for non-plotting commands
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    plt = _pyplot()
    with atomic_write(path) as fh:
        fig.savefig(fh, format="png", dpi=120, bbox_inches="tight")
    plt.close(fig)


def plot_loss_history(history, path, best_epoch=None):
    """Train/validation loss per epoch, log scale."""
    history = np.asarray(history, dtype=float).reshape(-1, 2)
    epochs = np.arange(1, len(history) + 1)
    fig, ax = _pyplot().subplots(figsize=(5, 3.2))
    ax.plot(epochs, history[:, 0], label="train", color="0.3")
    ax.plot(epochs, history[:, 1], label="validation (MAE)", color="tab:red")
    if best_epoch is not None and 0 <= best_epoch < len(history):
        ax.axvline(best_epoch + 1, ls=":", color="tab:red", lw=1)
    if np.all(history > 0):
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_median_scores(reports, path, metric="sdr"):
    """Grouped bars: median ``metric`` per source, one bar per report."""
    sources = []
    for r in reports:
        sources.extend(s for s in r.sources if s not in sources)
    x = np.arange(len(sources))
    width = 0.8 / max(len(reports), 1)
    fig, ax = _pyplot().subplots(figsize=(1.2 + 1.4 * len(sources), 3.2))
    for i, r in enumerate(reports):
        vals = [getattr(r.medians[s], metric) if s in r.medians else np.nan for s in sources]
        ax.bar(x + (i - (len(reports) - 1) / 2) * width, vals, width, label=r.name)
    ax.axhline(0, color="k", lw=0.6)
    ax.set_xticks(x)
    ax.set_xticklabels(sources)
    ax.set_ylabel(f"median {metric.upper()} (dB)")
    if len(reports) > 1:
        ax.legend(frameon=False, fontsize=8)
    _save(fig, path)
