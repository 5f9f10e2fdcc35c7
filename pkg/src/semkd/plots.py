"""Static figures rendered next to each run's delimited output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def session_curve(reports, path, title="Accuracy per session"):
    """Joint / base / novel / harmonic-mean accuracy against session index."""
    sessions = [r.session for r in reports]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(sessions, [r.joint_acc for r in reports], marker="o", label="joint")
    ax.plot(sessions, [r.acc_base for r in reports], marker="s", label="base")
    novel = [(r.session, r.acc_novel) for r in reports if r.acc_novel is not None]
    if novel:
        ax.plot([s for s, _ in novel], [a for _, a in novel], marker="^", label="novel")
    hm = [(r.session, r.hm) for r in reports if r.hm is not None]
    if hm:
        ax.plot([s for s, _ in hm], [a for _, a in hm], marker="d", linestyle="--",
                label="harmonic mean")
    ax.set_xlabel("session")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_xticks(sessions)
    ax.grid(alpha=0.3)
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def ablation_bars(rows, path, metric="joint_acc"):
    """Last-session accuracy per ablation variant."""
    names = [r["variant"] for r in rows]
    values = [r[metric] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(names)), 4.0))
    bars = ax.bar(range(len(names)), values, color="tab:blue")
    ax.bar_label(bars, fmt="%.3f")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel(f"last-session {metric}")
    ax.set_ylim(0.0, 1.05)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def dfsl_summary(report, path):
    """Joint and restricted-label accuracies with their forgetting gaps."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(8.0, 4.0))
    labels = ["joint", "base only", "novel only"]
    values = [report.joint_acc, report.base_individual, report.novel_individual]
    bars = left.bar(labels, values, color=["tab:blue", "tab:green", "tab:orange"])
    left.bar_label(bars, fmt="%.3f")
    left.set_ylim(0.0, 1.05)
    left.set_ylabel("accuracy")
    left.grid(axis="y", alpha=0.3)

    gaps = [report.delta_b, report.delta_n, report.delta]
    bars = right.bar(["delta_b", "delta_n", "delta"], gaps, color="tab:red")
    right.bar_label(bars, fmt="%.3f")
    right.axhline(0.0, color="black", linewidth=0.8)
    right.set_ylabel("joint - individual")
    right.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def aggregate_curves(groups, path):
    """Median joint accuracy per session with min/max bands, one line per group."""
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    for label, per_session in groups.items():
        sessions = sorted(per_session)
        median = [per_session[s]["median"] for s in sessions]
        lo = [per_session[s]["min"] for s in sessions]
        hi = [per_session[s]["max"] for s in sessions]
        (line,) = ax.plot(sessions, median, marker="o", label=label)
        ax.fill_between(sessions, lo, hi, color=line.get_color(), alpha=0.2)
    ax.set_xlabel("session")
    ax.set_ylabel("joint accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
