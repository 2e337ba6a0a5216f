"""Figure rendering for reports. Uses the non-interactive Agg backend."""
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_recall_curve(epsilons, curves, path):
    """Foot-contact recall against the velocity threshold, log x axis."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, r in curves.items():
        ax.plot(epsilons, r, marker="o", ms=3, label=label)
    ax.set_xscale("log")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("velocity threshold")
    ax.set_ylabel("foot-contact recall")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_attention(heat, path, frames=None):
    """Token-by-joint heatmap averaged over ``frames`` (all frames by default)."""
    rows = heat.token_rows if frames is None else heat.token_rows[list(frames)]
    mean = rows.mean(axis=0)  # (N, J+1)
    display = mean[:, :-1].copy()
    display[:, 0] = np.maximum(display[:, 0], mean[:, -1])
    fig, ax = plt.subplots(figsize=(max(6, 0.3 * display.shape[1]), 0.5 * display.shape[0] + 2))
    im = ax.imshow(display, aspect="auto", cmap="viridis", vmin=0)
    ax.set_yticks(range(len(heat.part_names)), heat.part_names)
    ax.set_xticks(range(display.shape[1]), heat.joint_names, rotation=90, fontsize=7)
    fig.colorbar(im, ax=ax, fraction=0.03)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_losses(csv_path, path):
    """Per-epoch loss terms from a training log."""
    with open(csv_path) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("rec", "cyc", "kine", "adv", "vel", "disc"):
        vals = np.array([float(r[key]) for r in rows])
        if np.any(vals > 0):
            ax.plot(epochs, vals, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
