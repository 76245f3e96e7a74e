"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def plot_metrics(rows, path: str) -> str:
    """Accuracy before/after each prune step, the gap, and the pruning rate per epoch."""
    epochs = [r.epoch for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax_acc, ax_rate) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 5.2))
        ax_acc.plot(epochs, [100 * r.acc_before for r in rows], label="before prune", lw=1.2)
        ax_acc.plot(epochs, [100 * r.acc_after for r in rows], label="after prune", lw=1.2, ls="--")
        gap = [100 * r.gap for r in rows]
        if any(not math.isnan(g) for g in gap):
            twin = ax_acc.twinx()
            twin.bar(epochs, gap, color="tab:red", alpha=0.3, width=0.8, label="gap")
            twin.set_ylabel("gap (points)")
        ax_acc.set_ylabel("test accuracy (%)")
        ax_acc.legend(loc="lower right")
        ax_rate.step(epochs, [r.rate for r in rows], where="post", color="tab:green")
        ax_rate.set_ylabel("pruning rate")
        ax_rate.set_xlabel("epoch")
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_schedule(schedule, path: str) -> str:
    """Rate curve with the three anchor points used to fit it."""
    e_max = schedule.epoch_max
    xs = [e_max * i / 400 for i in range(401)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(xs, [schedule.rate(x) for x in xs], lw=1.5)
        anchors = [(0, schedule.P_min), (schedule.D * e_max, 0.75 * schedule.P_goal), (e_max, schedule.P_goal)]
        ax.scatter(*zip(*anchors), color="tab:blue", zorder=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel("pruning rate")
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_flops(report, path: str) -> str:
    """Per-layer MACs, baseline against pruned."""
    names = [l.layer_id for l in report.layers]
    base = {l.layer_id: l.macs for l in report.baseline} if report.baseline else {}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.4, 0.12 * len(names)), 4.0))
        xs = range(len(names))
        ax.bar(xs, [base.get(n, 0) for n in names], color="0.8", label="baseline", width=0.9)
        ax.bar(xs, [l.macs for l in report.layers], color="tab:blue", label="pruned", width=0.6)
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names, rotation=90, fontsize=5)
        ax.set_ylabel("MACs")
        ax.set_title(f"pruned {100 * report.pruned_ratio:.1f}% of MACs", fontsize=9)
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return path
