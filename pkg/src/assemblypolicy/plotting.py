"""Static report figures rendered to files with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("total", "s1_mse", "s2_mse", "ar_ce", "aux")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(history: list[dict], path) -> Path:
    """One log-scale panel per loss term, plus the learning rate."""
    steps = np.array([r["step"] for r in history])
    keys = [k for k in LOSS_KEYS if history and k in history[0]]
    fig, axes = plt.subplots(1, len(keys) + 1, figsize=(3.2 * (len(keys) + 1), 3))
    for ax, k in zip(axes, keys):
        vals = np.array([r[k] for r in history], dtype=float)
        ax.plot(steps, np.maximum(vals, 1e-12), lw=1)
        ax.set_yscale("log")
        ax.set_title(k)
        ax.set_xlabel("step")
    axes[-1].plot(steps, [r["lr"] for r in history], lw=1, color="tab:orange")
    axes[-1].set_title("lr")
    axes[-1].set_xlabel("step")
    return _save(fig, path)


def benchmark_bars(report: dict, path) -> Path:
    """Grouped GSR / OSR / collision bars per skill."""
    names = list(report["skills"])
    metrics = [("gsr", "GSR"), ("osr", "OSR"), ("collision_rate", "collision")]
    x = np.arange(len(names))
    w = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(max(4, 1.8 * len(names) + 2), 3.2))
    for i, (key, label) in enumerate(metrics):
        ax.bar(x + (i - 1) * w, [100 * report["skills"][n][key] for n in names], w, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=15, ha="right")
    ax.set_ylim(0, 105)
    ax.set_ylabel("%")
    ax.set_title(f"{report['difficulty']} suite, {report['n_cases']} cases")
    ax.legend(fontsize=8)
    return _save(fig, path)


def routing_heatmap(rows: list[dict], path) -> Path:
    """Expert load per (stage, layer, skill) row; rows come from ``routing_rows``."""
    keys = sorted({(r["stage"], r["layer"], r["skill"]) for r in rows})
    experts = sorted({r["expert"] for r in rows})
    grid = np.zeros((len(keys), len(experts)))
    for r in rows:
        grid[keys.index((r["stage"], r["layer"], r["skill"])), experts.index(r["expert"])] = r["F_e"]
    fig, ax = plt.subplots(figsize=(1.2 * len(experts) + 3, 0.45 * len(keys) + 1.5))
    im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(experts)))
    ax.set_xticklabels([f"e{e}" for e in experts])
    ax.set_yticks(range(len(keys)))
    ax.set_yticklabels([f"{s} L{l} {k}" for s, l, k in keys], fontsize=7)
    fig.colorbar(im, ax=ax, label="top-k load")
    return _save(fig, path)


def heatmap_panel(maps: dict[str, np.ndarray], path) -> Path:
    """Grid of heatmaps: one row per named stack, one column per view."""
    names = list(maps)
    n_views = max(m.shape[0] for m in maps.values())
    fig, axes = plt.subplots(len(names), n_views, figsize=(2.2 * n_views, 2.2 * len(names)), squeeze=False)
    for i, name in enumerate(names):
        for v in range(n_views):
            ax = axes[i, v]
            ax.axis("off")
            if v < maps[name].shape[0]:
                ax.imshow(maps[name][v], cmap="magma")
                ax.set_title(f"{name} v{v}", fontsize=8)
    return _save(fig, path)
