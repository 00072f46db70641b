"""Static report figures (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_trajectories", "plot_precision_sweep", "plot_rank_history"]

_STYLE = {"truth": dict(color="0.2", lw=1.2), "qtt": dict(color="C0", lw=1.0),
          "fd": dict(color="C1", lw=1.0, ls="--"), "pf": dict(color="C2", lw=0.8, ls=":")}


def plot_trajectories(path, times, truth, estimates: dict) -> Path:
    """One panel per state component: truth and every backend's estimate."""
    truth = np.asarray(truth)
    d = truth.shape[1]
    fig, axes = plt.subplots(d, 1, figsize=(7, 2.2 * d), sharex=True, squeeze=False)
    for k, ax in enumerate(axes[:, 0]):
        ax.plot(times, truth[:, k], label="truth", **_STYLE["truth"])
        for name, est in estimates.items():
            ax.plot(times, np.asarray(est)[:, k], label=name, **_STYLE.get(name, {}))
        ax.set_ylabel(f"x{k + 1}")
    axes[0, 0].legend(loc="upper right", ncol=len(estimates) + 1, fontsize=8)
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_precision_sweep(path, eps, max_dev, mse=None) -> Path:
    """Deviation from the dense reference against online rounding precision."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.loglog(eps, max_dev, "o-", label="max |QTT - FD|")
    if mse is not None:
        ax.loglog(eps, mse, "s--", label="MSE")
    ax.invert_xaxis()
    ax.set_xlabel("online rounding precision")
    ax.set_ylabel("deviation")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_rank_history(path, times, ranks) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(times, ranks, lw=1.0)
    ax.set_xlabel("t")
    ax.set_ylabel("effective rank")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
