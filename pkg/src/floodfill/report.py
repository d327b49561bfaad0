"""Figure rendering for run artifacts.

Every report-style CSV the CLI writes gets a matplotlib PNG next to it:
training curves, the throughput-scaling plot, the learning-rate sweep grid,
and the per-checkpoint evaluation curves. Figures are a convenience view of
the CSVs; the CSVs remain the canonical output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(stats_rows, walls, out_png: str) -> str:
    steps = [r.step for r in stats_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, [r.loss for r in stats_rows], lw=0.9)
    ax1.set_xlabel("step")
    ax1.set_ylabel("cross-entropy loss")
    ax2.plot(steps, [r.f1 for r in stats_rows], lw=0.9, label="F1")
    ax2.plot(steps, [r.acc for r in stats_rows], lw=0.9, label="accuracy")
    ax2.set_xlabel("step")
    ax2.set_ylim(0, 1.02)
    ax2.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def save_scaling_figure(bench_rows, out_png: str) -> str:
    ps = [r.p for r in bench_rows]
    thr = [r.fovs_per_s for r in bench_rows]
    base = next((r.fovs_per_s / r.p for r in bench_rows if r.p == 1), thr[0] / ps[0])
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.plot(ps, [base * p for p in ps], "k--", lw=0.8, label="ideal")
    ax.plot(ps, thr, "o-", label="measured")
    ax.set_xlabel("workers")
    ax.set_ylabel("throughput (FOVs/s)")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def save_sweep_figure(sweep_rows, out_png: str) -> str:
    """sweep_rows: (batch, lr, smoothed, normalized) tuples."""
    batches = sorted({r[0] for r in sweep_rows})
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    best = {}
    for b in batches:
        pts = sorted((r[1], r[3]) for r in sweep_rows if r[0] == b)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", ms=4, label=f"batch {b}")
        best[b] = max(pts, key=lambda p: p[1])[0]
    if len(batches) > 1:
        b0 = batches[0]
        ref = [(b, best[b0] * b / b0) for b in batches]
        ax.plot([r[1] for r in ref], [1.0] * len(ref), "b:", lw=0.8, label="linear scaling")
        ref = [(b, best[b0] * (b / b0) ** 0.5) for b in batches]
        ax.plot([r[1] for r in ref], [1.0] * len(ref), "r:", lw=0.8, label="sqrt scaling")
    ax.set_xscale("log")
    ax.set_xlabel("learning rate")
    ax.set_ylabel("accuracy (normalized per batch)")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def save_eval_figure(eval_rows, out_png: str) -> str:
    """eval_rows: (checkpoint, step, are, voi_split, voi_merge, voi) tuples."""
    steps = [r[1] for r in eval_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, [r[2] for r in eval_rows], "o-")
    ax1.set_xlabel("training step")
    ax1.set_ylabel("adapted Rand error")
    ax2.plot(steps, [r[3] for r in eval_rows], "o-", label="VOI split")
    ax2.plot(steps, [r[4] for r in eval_rows], "o-", label="VOI merge")
    ax2.plot(steps, [r[5] for r in eval_rows], "o-", label="VOI")
    ax2.set_xlabel("training step")
    ax2.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png
