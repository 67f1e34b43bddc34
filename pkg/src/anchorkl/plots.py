"""Figure rendering for the report-producing subcommands.

Each CSV the CLI writes has a figure counterpart rendered here with a
non-interactive backend.  Figures are presentation artifacts only; the
CSVs stay the deterministic surface.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import RelRmseRecord
from .trainer import TrainMetrics

_REGIME_COLORS = {
    "stable_monotone": "#2c7fb8",
    "stable_oscillatory": "#fe9929",
    "unstable": "#d7301f",
}


def bench_figure(records: list[RelRmseRecord], path: Path) -> None:
    """Log-log RelRMSE vs batch size: sampled arm, per-K top-k arms,
    and the truncated bias floors (dashed)."""
    fig, ax = plt.subplots(figsize=(7.0, 4.6))
    ks = sorted({r.k for r in records if r.estimator == "topk"})
    cmap = plt.get_cmap("viridis")
    sampled = sorted((r.b, r.rel_rmse) for r in records if r.estimator == "sampled")
    if sampled:
        ax.loglog(*zip(*sampled), color="black", lw=2.0, label="sampled only")
    for i, k in enumerate(ks):
        color = cmap(i / max(len(ks) - 1, 1))
        topk = sorted((r.b, r.rel_rmse) for r in records if r.estimator == "topk" and r.k == k)
        trunc = sorted((r.b, r.rel_rmse) for r in records if r.estimator == "truncated" and r.k == k)
        ax.loglog(*zip(*topk), color=color, lw=1.4, label=f"top-k, K={k}")
        ax.loglog(*zip(*trunc), color=color, lw=1.0, ls="--")
    m = records[0].m if records else float("nan")
    ax.set_xlabel("batch tokens B")
    ax.set_ylabel("gradient RelRMSE")
    ax.set_title(f"Per-token reverse-KL gradient error (top-32 mass {m:g})")
    ax.grid(True, which="both", ls=":", alpha=0.4)
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def dynamics_figure(grid_rows: list[dict], path: Path) -> None:
    """Regime map over (alpha beta lambda_max, eta), crosses on mismatches."""
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    for row in grid_rows:
        color = _REGIME_COLORS[row["classified"]]
        marker = "o" if row.get("simulated", row["classified"]) == row["classified"] else "x"
        ax.scatter(row["alpha_beta_lambda_max"], row["eta"], c=color, marker=marker, s=36)
    ax.set_xscale("log")
    ax.set_xlabel(r"$\alpha\beta\lambda_{\max}$")
    ax.set_ylabel(r"$\eta$")
    ax.set_title("Lag-dynamics regimes (x = simulation disagrees)")
    handles = [
        plt.Line2D([], [], color=c, marker="o", ls="", label=name.replace("_", " "))
        for name, c in _REGIME_COLORS.items()
    ]
    ax.legend(handles=handles, fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def train_figure(metrics: TrainMetrics, path: Path) -> None:
    """Reward, KL estimate, and anchor lag along the training run."""
    fig, axes = plt.subplots(3, 1, figsize=(6.8, 7.2), sharex=True)
    steps = metrics.steps
    axes[0].plot(steps, metrics.mean_reward, color="#2c7fb8")
    axes[0].set_ylabel("mean reward")
    axes[1].plot(steps, metrics.kl_value, color="#d7301f")
    axes[1].set_ylabel("KL estimate")
    axes[2].plot(steps, metrics.lag_norm, color="#fe9929")
    axes[2].set_ylabel("anchor lag norm")
    axes[2].set_xlabel("step")
    for ax in axes:
        ax.grid(True, ls=":", alpha=0.4)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
