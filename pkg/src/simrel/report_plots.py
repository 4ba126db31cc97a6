"""Figure rendering for the report path.

Every plotting entry point takes data already computed elsewhere and writes a
PNG next to the delimited output; nothing in the compute path imports this
module.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_trace_figure(trace, eps: float, path) -> None:
    """Output error over time plus the two output trajectories."""
    fig, (ax_err, ax_xy) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_err.plot(trace.t, trace.err, lw=1.0, color="tab:blue")
    ax_err.axhline(eps, color="tab:red", ls="--", lw=1.0, label=f"eps = {eps:g}")
    ax_err.set_xlabel("step")
    ax_err.set_ylabel("output error (inf norm)")
    ax_err.legend(loc="best", fontsize=8)
    if trace.y.shape[1] >= 2:
        ax_xy.plot(trace.yhat[:, 0], trace.yhat[:, 1], lw=1.0, label="source")
        ax_xy.plot(trace.y[:, 0], trace.y[:, 1], lw=1.0, ls="--", label="target")
        ax_xy.set_xlabel("y[0]")
        ax_xy.set_ylabel("y[1]")
    else:
        ax_xy.plot(trace.t, trace.yhat[:, 0], lw=1.0, label="source")
        ax_xy.plot(trace.t, trace.y[:, 0], lw=1.0, ls="--", label="target")
        ax_xy.set_xlabel("step")
        ax_xy.set_ylabel("y[0]")
    ax_xy.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_history_figure(history: list[dict], path) -> None:
    """Per-iteration losses and Lipschitz bounds of a training run."""
    iters = [r["iter"] for r in history if "l_k" in r]
    if not iters:
        return
    fig, (ax_l, ax_lip) = plt.subplots(1, 2, figsize=(9, 3.4))
    for key, color in (("l1", "tab:gray"), ("l2", "tab:green"),
                       ("l3", "tab:orange"), ("l4", "tab:red"),
                       ("l_k", "tab:blue")):
        vals = [r[key] for r in history if "l_k" in r]
        if any(v > 0 for v in vals):
            ax_l.plot(iters, vals, lw=0.8, label=key, color=color)
    ax_l.set_yscale("symlog", linthresh=1e-6)
    ax_l.set_xlabel("iteration")
    ax_l.set_ylabel("loss")
    ax_l.legend(loc="best", fontsize=8)
    ax_lip.plot(iters, [r["L_V"] for r in history if "l_k" in r], label="L_V")
    ax_lip.plot(iters, [r["L_K"] for r in history if "l_k" in r], label="L_K")
    ax_lip.set_xlabel("iteration")
    ax_lip.set_ylabel("certified bound")
    ax_lip.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_mc_figure(report, eps: float, path) -> None:
    """Histogram of per-trial worst errors against the eps line."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if report.per_trial_max.size:
        ax.hist(report.per_trial_max, bins=min(30, max(5, report.trials // 4)),
                color="tab:blue", alpha=0.8)
    ax.axvline(eps, color="tab:red", ls="--", label=f"eps = {eps:g}")
    ax.set_xlabel("max output error per trial")
    ax.set_ylabel("trials")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
