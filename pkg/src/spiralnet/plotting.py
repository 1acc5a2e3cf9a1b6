"""PNG figures rendered next to the CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curve(path, history) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(history) + 1), history, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def distance_boxplots(path, rows) -> None:
    """One box per instrument and grouping; whiskers at the first and ninth deciles."""
    instruments = list(dict.fromkeys(r["group_id"] for r in rows if r["grouping"] == "instrument"))
    stats, positions, colors = [], [], []
    palette = {"instrument": "C0", "instrument+nuance": "C1", "instrument+pitch": "C2"}
    for i, inst in enumerate(instruments):
        for j, grouping in enumerate(palette):
            sel = [r for r in rows if r["grouping"] == grouping and r["group_id"].split("|")[0] == inst]
            if not sel:
                continue
            # pooled view of the group summaries: medians of each statistic
            s = {k: float(np.median([r[k] for r in sel])) for k in ("decile10", "q25", "median", "q75", "decile90")}
            stats.append({"whislo": s["decile10"], "q1": s["q25"], "med": s["median"], "q3": s["q75"],
                          "whishi": s["decile90"], "fliers": []})
            positions.append(4 * i + j)
            colors.append(palette[grouping])
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(instruments)), 3.6))
    boxes = ax.bxp(stats, positions=positions, widths=0.8, patch_artist=True, showfliers=False)
    for patch, c in zip(boxes["boxes"], colors):
        patch.set_facecolor(c)
    ax.set_yscale("log")
    ax.set_xticks([4 * i + 1 for i in range(len(instruments))])
    ax.set_xticklabels(instruments, rotation=30, ha="right")
    ax.set_ylabel("squared MFCC distance")
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in palette.values()]
    ax.legend(handles, list(palette), fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def accuracy_bars(path, report) -> None:
    names = list(report.class_names) + ["average"]
    acc = [a if a is not None else np.nan for a in report.accuracy] + [report.average]
    err = None
    if report.stddev is not None:
        err = [s if s is not None else 0.0 for s in report.stddev] + [report.average_stddev or 0.0]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.bar(np.arange(len(names)), acc, yerr=err, color=["C0"] * (len(names) - 1) + ["C3"], capsize=3)
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 100)
    ax.set_ylabel("excerpt accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
