"""Figures rendered from the TSV epoch logs written by ``attnfer train``."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .train import LOG_HEADER  # noqa: E402


def read_log(path):
    """Parse a training log into column lists keyed by header name."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != LOG_HEADER:
            raise ValueError(f"{path}: unexpected log header {header!r}")
        cols = {name: [] for name in header.split("\t")}
        for line in fh:
            if not line.strip():
                continue
            for name, value in zip(cols, line.rstrip("\n").split("\t")):
                cols[name].append(int(value) if name == "epoch" else float(value))
    return cols


def plot_curves(logs, out_path, title=None):
    """Loss and accuracy curves for one or more logs (``{label: path}``) side by side."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for i, (label, path) in enumerate(logs.items()):
        cols = read_log(path)
        color = f"C{i % 10}"
        ax_loss.plot(cols["epoch"], cols["train_loss"], color=color, label=f"{label} train")
        ax_acc.plot(cols["epoch"], cols["train_acc"], color=color, label=f"{label} train")
        if not all(math.isnan(v) for v in cols["val_acc"]):
            ax_loss.plot(cols["epoch"], cols["val_loss"], color=color, ls="--", label=f"{label} val")
            ax_acc.plot(cols["epoch"], cols["val_acc"], color=color, ls="--", label=f"{label} val")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_loss.set_yscale("log")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.02)
    for ax in (ax_loss, ax_acc):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8, frameon=False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
