"""Report figures, rendered headless to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "svg.hashsalt": "fillscope",
}

# PNG metadata carries the matplotlib version and a timestamp by default
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def lorenz(x, y, gini: float, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--", label="equality")
        ax.plot(x, y, color="C0", lw=1.5, label=f"Lorenz (Gini {gini:.3f})")
        ax.fill_between(x, y, x, color="C0", alpha=0.12)
        ax.set_xlabel("cumulative share of addresses")
        ax.set_ylabel("cumulative share of notional")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.legend(loc="upper left")
        return _save(fig, path)


def tier_concentration(groups: dict, path: Path) -> Path:
    names = list(groups)
    pop = [groups[n]["population_share"] for n in names]
    vol = [groups[n]["notional_share"] for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        pos = np.arange(len(names))
        ax.bar(pos - 0.2, pop, width=0.4, label="population share")
        ax.bar(pos + 0.2, vol, width=0.4, label="notional share")
        ax.set_xticks(pos)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("share")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def kyle_lambda(raw: Sequence[float], band: tuple, path: Path) -> Path:
    raw = np.asarray(raw, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        if raw.size:
            mag = np.sign(raw) * np.log10(1 + np.abs(raw))
            ax.hist(mag, bins=min(60, max(10, raw.size // 4)), color="C1", alpha=0.8)
            for v in band:
                if v is not None:
                    ax.axvline(np.sign(v) * np.log10(1 + abs(v)), color="k", lw=0.8, ls=":")
        ax.set_xlabel("sign(lambda) * log10(1 + |lambda|)")
        ax.set_ylabel("markets")
        fig.tight_layout()
        return _save(fig, path)


def bilateral_heatmap(groups: Sequence[str], metrics: Sequence[str], rho: np.ndarray,
                      significant: np.ndarray, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.0, 0.35 * len(metrics) + 2), 0.45 * len(groups) + 1.6))
        shown = np.where(np.isnan(rho), 0.0, rho)
        im = ax.imshow(shown, cmap="RdBu_r", vmin=-1, vmax=1, aspect="auto")
        for i in range(len(groups)):
            for j in range(len(metrics)):
                if significant[i, j]:
                    ax.text(j, i, "*", ha="center", va="center", fontsize=8)
        ax.set_xticks(range(len(metrics)))
        ax.set_xticklabels(metrics, rotation=70, ha="right", fontsize=7)
        ax.set_yticks(range(len(groups)))
        ax.set_yticklabels(groups)
        fig.colorbar(im, ax=ax, label="Spearman rho")
        fig.tight_layout()
        return _save(fig, path)


def kmeans_centroids(centroids: np.ndarray, feature_names: Sequence[str], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 0.4 * len(centroids) + 1.5))
        lim = float(np.max(np.abs(centroids))) or 1.0
        im = ax.imshow(centroids, cmap="PuOr", vmin=-lim, vmax=lim, aspect="auto")
        ax.set_xticks(range(len(feature_names)))
        ax.set_xticklabels(feature_names)
        ax.set_yticks(range(len(centroids)))
        ax.set_yticklabels([f"k{i}" for i in range(len(centroids))])
        fig.colorbar(im, ax=ax, label="standardized value")
        fig.tight_layout()
        return _save(fig, path)


def crosstab_heatmap(table: dict, path: Path) -> Path:
    counts = np.asarray(table["counts"], dtype=float)
    rows = list(table["tiers"]) + ["WHALE"]
    data = np.vstack([counts, np.asarray(table["whale_row"], dtype=float)]) if counts.size else np.zeros((len(rows), 0))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.6))
        ax.imshow(np.log1p(data), cmap="Greys", aspect="auto")
        for i in range(data.shape[0]):
            for j in range(data.shape[1]):
                ax.text(j, i, f"{int(data[i, j])}", ha="center", va="center", fontsize=7, color="C3")
        ax.set_xticks(range(data.shape[1]))
        ax.set_xticklabels([str(c) for c in table["clusters"]])
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels(rows)
        ax.set_xlabel("cluster")
        fig.tight_layout()
        return _save(fig, path)
