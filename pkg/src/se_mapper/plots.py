"""Static figure rendering for the report paths of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_reward_curve(metrics: Sequence[Mapping[str, object]], path: str | Path) -> None:
    iters = [row["iter"] for row in metrics]
    mean_r = [row["mean_return"] for row in metrics]
    best_r = [row["best_return"] for row in metrics]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(iters, mean_r, label="mean return", alpha=0.7)
    ax.plot(iters, best_r, label="best return", linewidth=2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("episode return")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_return_curves(
    curves: Mapping[str, tuple[Sequence[float], Sequence[float]]], path: str | Path, title: str = ""
) -> None:
    """One best-return-vs-iteration line per labeled method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("best return")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cycles_vs_nodes(
    rows: Sequence[Mapping[str, object]], methods: Sequence[str], path: str | Path
) -> None:
    """Cycle counts per method against graph size."""
    fig, ax = plt.subplots(figsize=(6, 4))
    sizes = [row["nodes"] for row in rows]
    for method in methods:
        ys = [row.get(method) for row in rows]
        xs = [s for s, y in zip(sizes, ys) if y not in (None, "")]
        ys = [y for y in ys if y not in (None, "")]
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel("graph nodes")
    ax.set_ylabel("best total cycles")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_attention_heatmap(matrix: np.ndarray, path: str | Path, title: str = "") -> None:
    """Row r shows the attention weights used while placing node r."""
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(matrix, cmap="viridis", aspect="auto")
    ax.set_xlabel("attended node")
    ax.set_ylabel("node being placed")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sa_trace(trace: Sequence[Mapping[str, float]], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [row["step"] for row in trace]
    ax.plot(steps, [row["objective"] for row in trace], alpha=0.5, label="objective")
    ax.plot(steps, [row["best"] for row in trace], linewidth=2, label="best")
    ax.set_xlabel("step")
    ax.set_ylabel("objective")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
