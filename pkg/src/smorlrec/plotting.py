"""Per-k curve tables and their matplotlib renderings."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CURVES = (("cv_all", "CV@k (all items)"), ("cv_longtail", "CV@k (long tail)"), ("ndcg", "NDCG@k"), ("hr", "HR@k"))


def curve_table(reports: dict) -> str:
    """Whitespace-aligned columns ``k <label>:<metric> ...`` for every run label."""
    labels = list(reports)
    ks = sorted(next(iter(reports.values())).hr)
    header = ["k"] + [f"{lab}:{name}" for lab in labels for name, _ in CURVES]
    lines = ["\t".join(header)]
    for k in ks:
        row = [str(k)]
        for lab in labels:
            row += [f"{getattr(reports[lab], name)[k]:.6f}" for name, _ in CURVES]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def plot_curves(reports: dict, path):
    fig, axes = plt.subplots(1, len(CURVES), figsize=(4 * len(CURVES), 3.4), constrained_layout=True)
    for ax, (name, title) in zip(axes, CURVES):
        for lab, rep in reports.items():
            ks = sorted(getattr(rep, name))
            ax.plot(ks, [getattr(rep, name)[k] for k in ks], marker="o", label=str(lab))
        ax.set_title(title)
        ax.set_xlabel("k")
        ax.set_xticks(ks)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize="small")
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def plot_sweep(settings, reports, path, k=10):
    """Bar panels of HR, NDCG, coverage and repetitiveness at ``k`` per setting."""
    panels = [("hr", "HR"), ("ndcg", "NDCG"), ("cv_all", "CV"), ("cv_longtail", "CV long tail"), ("repetitiveness", "R")]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.4 * len(panels), 3.6), constrained_layout=True)
    x = range(len(settings))
    for ax, (name, title) in zip(axes, panels):
        ax.bar(x, [getattr(r, name).get(k, float("nan")) for r in reports], color="tab:blue")
        ax.set_xticks(list(x), [str(s) for s in settings], rotation=45, ha="right", fontsize="small")
        ax.set_title(f"{title}@{k}")
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
