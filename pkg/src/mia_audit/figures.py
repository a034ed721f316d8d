"""Figure rendering for the report path.

Everything here is downstream of the delimited outputs: figures are drawn
from report.json / transfer_report.json / roc_*.csv as written to disk,
never from in-memory state, so a rendered page always reflects the files
next to it. The evaluation and transfer libraries stay plot-free.
"""

from __future__ import annotations

import csv
import json
import os


def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_roc_csv(path: str) -> tuple[list[float], list[float]]:
    fprs, tprs = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        for row in reader:
            fprs.append(float(row[1]))
            tprs.append(float(row[2]))
    return fprs, tprs


def _fkey(x: float) -> str:
    return format(float(x), "g")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_report_figures(out_dir: str) -> list[str]:
    """ROC overlay plus a metric summary, from the files in out_dir."""
    plt = _pyplot()
    report = _load_json(os.path.join(out_dir, "report.json"))
    written = []

    roc_files = sorted(f for f in os.listdir(out_dir) if f.startswith("roc_") and f.endswith(".csv"))
    if roc_files:
        fig, ax = plt.subplots(figsize=(6.0, 5.0))
        for name in roc_files:
            fprs, tprs = _load_roc_csv(os.path.join(out_dir, name))
            ax.plot(fprs, tprs, lw=1.2, label=name[len("roc_") : -len(".csv")])
        ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title("attack ROC curves")
        ax.legend(fontsize=6, loc="lower right")
        fig.savefig(os.path.join(out_dir, "roc_curves.png"), dpi=120)
        plt.close(fig)
        written.append("roc_curves.png")

    aggregate = report.get("aggregate", {})
    target = _fkey(report["config"]["fpr_targets"][0])
    if report["experiment"] == "sample_scarcity" and aggregate:
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        ks = [str(k) for k in report["config"]["scarcity_ks"]]
        for attack, per_k in sorted(aggregate.items()):
            ys = [per_k[k]["combined"][target] for k in ks if k in per_k]
            ax.plot(ks[: len(ys)], ys, marker="o", label=attack)
        ax.set_xlabel("public examples per class")
        ax.set_ylabel(f"median TPR at FPR {target}")
        ax.set_title("attack power vs attacker data")
        ax.legend(fontsize=8)
        fig.savefig(os.path.join(out_dir, "scarcity_trend.png"), dpi=120)
        plt.close(fig)
        written.append("scarcity_trend.png")
    elif aggregate:
        groups = sorted({g for per in aggregate.values() for g in per})
        attacks = sorted(aggregate)
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        width = 0.8 / max(len(attacks), 1)
        for i, attack in enumerate(attacks):
            xs = [j + i * width for j in range(len(groups))]
            ys = [aggregate[attack].get(g, {}).get(target, 0.0) for g in groups]
            ax.bar(xs, ys, width=width, label=attack)
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(groups))])
        ax.set_xticklabels(groups)
        ax.set_ylabel(f"median TPR at FPR {target}")
        ax.set_title("attack power by query group")
        ax.legend(fontsize=8)
        fig.savefig(os.path.join(out_dir, "tpr_summary.png"), dpi=120)
        plt.close(fig)
        written.append("tpr_summary.png")
    return written


def render_transfer_figures(out_dir: str) -> list[str]:
    """Scenario ordering and coverage-transfer summary from transfer_report.json."""
    plt = _pyplot()
    report = _load_json(os.path.join(out_dir, "transfer_report.json"))
    order = ["rough", "mid", "linear"]
    mses = [report["scenario_mse_medians"][n] for n in order]
    devs = [report["scenario_deviation_medians"][n] for n in order]

    fig, (left, right) = plt.subplots(1, 2, figsize=(9.0, 4.0))
    xs = range(len(order))
    left.bar(xs, mses, width=0.5, color="tab:blue", label="ratio-fit MSE")
    left.set_xticks(list(xs))
    left.set_xticklabels(order)
    left.set_ylabel("linear ratio-fit MSE")
    twin = left.twinx()
    twin.plot(list(xs), devs, marker="o", color="tab:red", label="coverage deviation")
    twin.set_ylabel("|coverage_Q - alpha|")
    left.set_title("shift smoothness: MSE vs transfer")

    alpha = report["alpha"]
    first_seed = str(report["seeds"][0])
    labels = ["P", "Q (theorem)", "Q (counterexample)"]
    values = [
        report["coverage_P"],
        report["coverage_Q"],
        report["per_seed"][first_seed]["counterexample"]["coverage_Q"],
    ]
    right.bar(range(3), values, width=0.5, color=["gray", "tab:green", "tab:orange"])
    right.axhline(alpha, ls="--", c="black", lw=0.8)
    right.set_xticks(range(3))
    right.set_xticklabels(labels, fontsize=8)
    right.set_ylabel("empirical coverage")
    right.set_title(f"coverage vs nominal {alpha:g}")

    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "transfer_ordering.png"), dpi=120)
    plt.close(fig)
    return ["transfer_ordering.png"]
