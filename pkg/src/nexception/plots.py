"""Figure rendering for training runs, searches, importance, and benchmarks.

Every function writes a PNG next to the delimited artifacts and returns the
path. The Agg backend is forced before pyplot is imported so rendering works
on headless machines.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_DPI = 150


def training_curves(history: list[dict], path: str) -> str:
    """Loss and accuracy curves over epochs from metric rows."""
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_acc) = plt.subplots(2, 1, sharex=True,
                                          figsize=(6.4, 6.0))
    ax_loss.plot(epochs, [r["train_loss"] for r in history],
                 label="train loss", marker=".")
    if any(r["val_loss"] == r["val_loss"] for r in history):
        ax_loss.plot(epochs, [r["val_loss"] for r in history],
                     label="val loss", marker=".")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right")
    ax_loss.grid(True, alpha=0.3)

    ax_acc.plot(epochs, [r["val_top1"] for r in history],
                label="val top-1", marker=".")
    ax_acc.plot(epochs, [r["val_top5"] for r in history],
                label="val top-5", marker=".")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylim(0.0, 1.0)
    ax_acc.legend(loc="lower right")
    ax_acc.grid(True, alpha=0.3)

    ax_lr = ax_acc.twinx()
    ax_lr.plot(epochs, [r["lr"] for r in history], color="gray",
               linestyle="--", linewidth=1.0, label="lr")
    ax_lr.set_ylabel("learning rate")

    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def search_trace(trials, path: str) -> str:
    """Per-trial objective scatter with the running incumbent staircase."""
    idx = [t.index for t in trials]
    obj = [t.objective for t in trials]
    inc = [t.incumbent_objective for t in trials]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ok = [not t.diverged for t in trials]
    ax.scatter([i for i, k in zip(idx, ok) if k],
               [o for o, k in zip(obj, ok) if k],
               s=18, label="trial", alpha=0.8)
    if not all(ok):
        ax.scatter([i for i, k in zip(idx, ok) if not k],
                   [o for o, k in zip(obj, ok) if not k],
                   s=26, marker="x", color="crimson", label="diverged")
    ax.step(idx, inc, where="post", color="black", linewidth=1.2,
            label="incumbent")
    ax.set_xlabel("trial")
    ax.set_ylabel("objective")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def importance_bars(importance: dict[str, float], path: str) -> str:
    """Horizontal bars, largest share on top."""
    items = sorted(importance.items(), key=lambda kv: kv[1])
    names = [k for k, _ in items]
    vals = [v for _, v in items]
    fig, ax = plt.subplots(figsize=(6.4, 0.35 * len(items) + 1.2))
    ax.barh(names, vals)
    ax.set_xlabel("importance share")
    ax.set_xlim(0.0, 1.0)
    ax.grid(True, axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def bench_bars(reports: list[dict], path: str) -> str:
    """Mean images/second with a std whisker per benchmarked model."""
    names = [r["model"] for r in reports]
    means = [r["ips_mean"] for r in reports]
    stds = [r["ips_std"] for r in reports]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.bar(names, means, yerr=stds, capsize=4)
    ax.set_ylabel("images / second")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
