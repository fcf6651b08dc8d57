"""Matplotlib figures written next to the metric CSVs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"adaptive": "tab:blue", "greedy": "tab:orange", "static": "tab:gray"}
# fixed metadata keeps PNG bytes independent of the matplotlib build
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def training_curve(iterations, mean_return, eval_iters, eval_score, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(iterations, mean_return, lw=1, color="tab:gray", label="rollout mean reward")
    if len(eval_iters):
        ax.plot(eval_iters, eval_score, "o-", ms=3, color="tab:blue", label="evaluator score")
    ax.set_xlabel("iteration")
    ax.set_ylabel("reward")
    ax.legend(frameon=False)
    return _save(fig, path)


def _sweep(series: Mapping[str, tuple], xlabel: str, ylabel: str, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for name, (x, mean, std) in series.items():
        x, mean, std = map(np.asarray, (x, mean, std))
        color = COLORS.get(name)
        ax.plot(x, mean, "o-", ms=4, color=color, label=name)
        ax.fill_between(x, mean - std, mean + std, color=color, alpha=0.15, lw=0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    return _save(fig, path)


def power_vs_bandwidth(series: Mapping[str, tuple], path: Path) -> Path:
    """``series`` maps scheme -> (bandwidths, mean dBm, std dBm)."""
    return _sweep(series, "bandwidth (MHz)", "mean transmit power (dBm)", path)


def sc_vs_snr(series: Mapping[str, tuple], path: Path) -> Path:
    """``series`` maps scheme -> (snr dB, mean SC, std SC)."""
    return _sweep(series, "SNR (dB)", "semantic consistency", path)


def ablation(summary: Mapping[str, Mapping[str, float]], path: Path) -> Path:
    schemes = list(summary)
    metrics = ["tcr", "te_norm", "sc"]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    width = 0.8 / len(schemes)
    for i, s in enumerate(schemes):
        xs = np.arange(len(metrics)) + (i - (len(schemes) - 1) / 2) * width
        ax.bar(xs, [summary[s][m] for m in metrics], width, color=COLORS.get(s), label=s)
    ax.set_xticks(np.arange(len(metrics)), ["TCR", "TE (norm.)", "SC"])
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    return _save(fig, path)


def episode_metrics(seeds: Sequence[int], tcr, te_norm, sc, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, ys in (("TCR", tcr), ("TE (norm.)", te_norm), ("SC", sc)):
        ax.plot(seeds, ys, "o-", ms=4, label=label)
    ax.set_xlabel("seed")
    ax.set_ylim(-0.02, 1.05)
    ax.legend(frameon=False)
    return _save(fig, path)


def world_map(world, path: Path) -> Path:
    from .scenario import PATCH_ENCODING

    m = world.map
    grid = np.array([[PATCH_ENCODING[k] for k in row] for row in m.cells])
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(grid, cmap="gray_r", vmin=0, vmax=1, origin="upper")
    for d in world.devices:
        ax.plot(d.position[0], d.position[1], "o", ms=5, label=f"{d.id}:{d.kind.value}")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(frameon=False, fontsize=6, loc="upper left", bbox_to_anchor=(1, 1))
    return _save(fig, path)


def explanation(patch: np.ndarray, heatmap: np.ndarray, title: str, path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    axes[0].imshow(patch, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("observed patch")
    axes[1].imshow(patch, cmap="gray", vmin=0, vmax=1)
    axes[1].imshow(heatmap, cmap="jet", alpha=0.5, vmin=0, vmax=1)
    axes[1].set_title(title)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)
