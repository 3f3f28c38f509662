"""Figures written next to the delimited reports."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (6.4, 4.0)
GRID_KWARGS = dict(linestyle="-", color="black", linewidth=0.5, alpha=0.3)


def _finish(fig, ax, path, xlabel, ylabel, legend=True):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, **GRID_KWARGS)
    if legend and ax.get_legend_handles_labels()[0]:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_variance_distribution(rows, path):
    """Sorted per-neuron variance (log scale) with cumulative share, per layer."""
    by_layer = defaultdict(list)
    for layer, rank, var, cum in rows:
        by_layer[int(layer)].append((int(rank), float(var), float(cum)))
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax2 = ax.twinx()
    for layer, pts in sorted(by_layer.items()):
        n = len(pts)
        x = [r / n for r, _, _ in pts]
        line, = ax.plot(x, [max(v, 1e-12) for _, v, _ in pts], label=f"layer {layer}")
        ax2.plot(x, [c for _, _, c in pts], linestyle="--", color=line.get_color(), linewidth=0.8)
    ax.set_yscale("log")
    ax2.set_ylabel("cumulative variance share")
    ax2.set_ylim(0, 1)
    return _finish(fig, ax, path, "neuron rank (fraction of layer)", "variance")


def plot_sweep(rows, path):
    rates = [float(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(rates, [float(r[3]) for r in rows], marker="o", label="retention")
    finals = [(float(r[0]), float(r[4])) for r in rows if r[4] not in (None, "")]
    if finals:
        ax.plot(*zip(*finals), marker="s", label="final top-1")
    return _finish(fig, ax, path, "pruning rate", "accuracy / retention")


def plot_plan_summary(rows, path):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.bar([int(r[0]) for r in rows], [float(r[3]) for r in rows], color="C0")
    ax.set_ylim(0, 1)
    return _finish(fig, ax, path, "layer", "fraction of hidden neurons pruned", legend=False)


def plot_histograms(rows, path):
    """One panel per selected neuron, pre and post histograms overlaid."""
    groups = defaultdict(lambda: {"pre": [], "post": []})
    for layer, neuron, stage, _, lo, hi, count in rows:
        groups[(int(layer), int(neuron))][stage].append((float(lo), float(hi), int(count)))
    keys = sorted(groups)
    fig, axes = plt.subplots(len(keys), 1, figsize=(FIGSIZE[0], 2.0 * len(keys)), squeeze=False)
    for ax, key in zip(axes[:, 0], keys):
        for stage, color in (("pre", "C0"), ("post", "C1")):
            bins = groups[key][stage]
            ax.bar([lo for lo, _, _ in bins], [c for _, _, c in bins],
                   width=[hi - lo for lo, hi, _ in bins], align="edge", alpha=0.5, color=color, label=stage)
        ax.set_title(f"layer {key[0]} neuron {key[1]}", fontsize=9)
        ax.legend(loc="best", fontsize=7)
    return _finish(fig, axes[-1, 0], path, "activation", "count", legend=False)


def plot_ablation(rows, path):
    labels = [f"{r[0]}/{r[1]}/{r[2]}" for r in rows]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.bar(range(len(rows)), [float(r[3]) for r in rows], yerr=[float(r[4]) for r in rows], capsize=3)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=20, fontsize=8)
    return _finish(fig, ax, path, "criterion / mode / tap", "mean retention", legend=False)


def plot_training_log(rows, path):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    epochs = [int(r[0]) for r in rows]
    ax.plot(epochs, [float(r[2]) for r in rows], marker="o", label="train loss")
    ax.plot(epochs, [float(r[3]) for r in rows], marker="s", label="val top-1")
    return _finish(fig, ax, path, "epoch", "value")


def plot_report(rows, path):
    """Retention and final accuracy against MACs for a comparison table."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for label, macs, _, ret, final in rows:
        if ret not in ("", None, "-"):
            ax.scatter(float(macs) / 1e6, float(ret), marker="o", color="C0")
            ax.annotate(label, (float(macs) / 1e6, float(ret)), fontsize=7)
        if final not in ("", None, "-"):
            ax.scatter(float(macs) / 1e6, float(final), marker="s", color="C1")
    return _finish(fig, ax, path, "MACs (M)", "retention (o) / final top-1 (s)", legend=False)
