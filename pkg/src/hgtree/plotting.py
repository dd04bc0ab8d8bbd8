"""Report figures, rendered off-screen next to the CSV they summarize."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp, dpi=120, bbox_inches="tight")
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_loss_curve(metrics_csv, out_png) -> Path:
    steps, losses, lrs = [], [], []
    with open(metrics_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
            lrs.append(float(row["lr"]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1.2, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss (nats/token)")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, lw=0.8, color="tab:gray", ls="--")
    ax2.set_ylabel("learning rate", color="tab:gray")
    ax.grid(alpha=0.3)
    return _save(fig, out_png)


def plot_bench(results, out_png) -> Path:
    names = [r.variant for r in results]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, attr, label in zip(axes, ("seconds_per_step", "peak_rss_mb", "attention_cost"),
                               ("s / step", "peak RSS (MB)", "attention scores")):
        ax.bar(names, [getattr(r, attr) for r in results], color=["tab:gray", "tab:orange", "tab:green"][: len(names)])
        ax.set_title(label, fontsize=9)
    fig.suptitle(f"context {results[0].context}, {results[0].layers} layers", fontsize=10)
    return _save(fig, out_png)


def plot_eval(report, out_png) -> Path:
    keys = ["connect", "novel", "unique", "cov_cd", "mmd_cd", "jsd"]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(keys, [getattr(report, k) for k in keys], color="tab:blue")
    ax.set_ylim(0, max(1.0, max(getattr(report, k) for k in keys) * 1.1))
    ax.set_title(f"{report.n_gen} generated vs {report.n_ref} reference", fontsize=9)
    return _save(fig, out_png)


def plot_trees(trees, out_png, cols: int = 4) -> Path:
    """Side views (x-z) of up to ``cols * 2`` skeletons, line width following radius."""
    trees = [t for t in trees if t is not None][: cols * 2]
    rows = max(1, -(-len(trees) // cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.6 * rows), squeeze=False)
    for ax in axes.flat:
        ax.set_axis_off()
    for ax, t in zip(axes.flat, trees):
        for b in t.data:
            ax.plot([b[0], b[4]], [b[2], b[6]], color="saddlebrown", lw=max(0.3, 40 * float(b[3])))
        ax.set_aspect("equal")
        ax.set_xlim(-1.05, 1.05)
        ax.set_ylim(-1.05, 1.05)
    return _save(fig, out_png)
