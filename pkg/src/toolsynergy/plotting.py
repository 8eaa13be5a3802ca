"""Report figures. Everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import ComplementarityReport  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_complementarity(report: ComplementarityReport, path) -> Path:
    """Bar per exact correct-subset cell, largest first."""
    cells = sorted(report.subset_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    labels = []
    for key, _ in cells:
        members = [f"T{j}" for j, bit in enumerate(key) if bit == "1"]
        labels.append("+".join(members) if members else "none")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(cells)), 3.0))
        ax.bar(range(len(cells)), [c for _, c in cells], color="#4c72b0")
        ax.set_xticks(range(len(cells)))
        ax.set_xticklabels(labels, rotation=60, ha="right")
        ax.set_ylabel("instances")
        ax.set_title("instances correct under exactly this tool subset")
        return _save(fig, path)


def plot_marginal_curve(report: ComplementarityReport, path) -> Path:
    k = len(report.marginal_curve)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.8))
        ax.plot(range(1, k + 1), report.marginal_curve, "o-", label="oracle (greedy tool order)")
        ax.axhline(max(report.single_accuracy), ls="--", color="gray", label="best single tool")
        ax.set_xticks(range(1, k + 1))
        ax.set_xticklabels([f"+T{t}" for t in report.greedy_order])
        ax.set_xlabel("tools added")
        ax.set_ylabel("accuracy")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_training_curve(log: list[dict], path) -> Path:
    it = [r["iteration"] for r in log]
    with plt.rc_context(_RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for key in ("reward_overall", "reward_brier", "reward_override", "reward_format"):
            a1.plot(it, [r[key] for r in log], label=key.replace("reward_", ""))
        a1.set_xlabel("iteration")
        a1.set_ylabel("mean reward")
        a1.legend(frameon=False)
        a2.plot(it, [r["batch_accuracy"] for r in log], label="batch accuracy")
        a2.plot(it, [r["mean_tool_calls"] / max(1.0, max(x["mean_tool_calls"] for x in log)) for r in log],
                label="tool calls (scaled)")
        a2.set_xlabel("iteration")
        a2.legend(frameon=False)
        return _save(fig, path)


def plot_method_bars(rows: list[dict], path, metric: str = "macro_accuracy", err: str | None = None) -> Path:
    names = [r["method"] for r in rows]
    vals = [r[metric] for r in rows]
    errs = [r.get(err, 0.0) for r in rows] if err else None
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(rows)), 3.0))
        ax.bar(range(len(rows)), vals, yerr=errs, color="#55a868", capsize=3)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_ylim(0, 1)
        return _save(fig, path)
