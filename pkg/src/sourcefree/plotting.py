"""Static figures written next to the delimited outputs (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from sourcefree.evaluation import GridResult, SsmHistogram  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ssm_histogram(hist: SsmHistogram, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    centers = 0.5 * (hist.edges[1:] + hist.edges[:-1])
    width = hist.edges[1] - hist.edges[0]
    for name, counts in hist.counts.items():
        total = max(int(counts.sum()), 1)
        ax.step(centers, counts / total, where="mid", label=f"{name} (mean {hist.means[name]:.2f})")
    ax.set_xlim(hist.edges[0] - width, hist.edges[-1] + width)
    ax.set_xlabel("w")
    ax.set_ylabel("fraction")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_grid(grid: GridResult, path, title: str = "T_avg") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    data = np.ma.masked_invalid(grid.t_avg)
    im = ax.imshow(data, vmin=0.0, vmax=1.0, cmap="viridis", origin="lower")
    ax.set_xticks(range(len(grid.target_private)), [str(t) for t in grid.target_private])
    ax.set_yticks(range(len(grid.source_private)), [str(s) for s in grid.source_private])
    ax.set_xlabel("target-private classes")
    ax.set_ylabel("source-private classes")
    for i in range(data.shape[0]):
        for j in range(data.shape[1]):
            v = grid.t_avg[i, j]
            ax.text(j, i, "x" if np.isnan(v) else f"{v:.2f}", ha="center", va="center", color="w", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def plot_trace(trace: Sequence[dict], path, keys: Sequence[str] | None = None) -> Path:
    """Loss curves; rows either carry ``loss``/``value`` pairs or one column per loss."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    series: dict[str, tuple[list, list]] = {}
    for row in trace:
        if "loss" in row:
            xs, ys = series.setdefault(row["loss"], ([], []))
            xs.append(row["step"])
            ys.append(row["value"])
        else:
            for k in keys or [k for k in row if k not in ("step", "wall")]:
                xs, ys = series.setdefault(k, ([], []))
                xs.append(row["step"])
                ys.append(row[k])
    for name, (xs, ys) in series.items():
        ax.plot(xs, ys, label=name, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if series:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(xs, ys, path, xlabel: str, ylabel: str) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, path)
