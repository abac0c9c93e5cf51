"""Clustering-independent feature-tier stratification and concentration statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

HFO = "HFO"
HBO = "HBO"
POWER = "POWER"
ACTIVE_RETAIL = "ACTIVE_RETAIL"
EPISODIC_RETAIL = "EPISODIC_RETAIL"
TIERS = (HFO, HBO, POWER, ACTIVE_RETAIL, EPISODIC_RETAIL)
STRICT_NON_RETAIL = (HFO, POWER)    # plus the whale overlay


def nearest_rank(values, q: float) -> float:
    """Type-1 (nearest-rank) quantile: the ceil(q*n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("empty sample")
    if not 0 < q <= 1:
        raise ValueError("quantile must be in (0, 1]")
    k = max(int(math.ceil(q * v.size - 1e-12)), 1)
    return float(v[k - 1])


@dataclass(frozen=True)
class TierThresholds:
    whale_notional: float = 1_000_000.0
    whale_single_market_share: float | None = 0.005
    hfo_f2: float = 0.95
    hfo_f9: float = 0.75
    hbo_f9: float = 0.95
    power_f2: float = 0.75
    power_notional: float = 0.75
    episodic_cap: float = 10_000.0

    def __post_init__(self):
        for name in ("hfo_f2", "hfo_f9", "hbo_f9", "power_f2", "power_notional"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must be a fraction in (0, 1)")
        if not self.whale_notional > self.episodic_cap:
            raise ValueError("whale_notional must exceed episodic_cap")


@dataclass(frozen=True)
class TierLabel:
    tier: str
    whale: bool
    whale_by_notional: bool = False
    whale_by_share: bool = False


@dataclass
class TierInputs:
    """Column view of the population the cutoffs are computed on."""

    addresses: list[str]
    f2: np.ndarray
    f9: np.ndarray
    notional: np.ndarray
    max_market_share: np.ndarray

    @classmethod
    def build(cls, addresses: Sequence[str], f2, f9, notional, max_market_share=None) -> "TierInputs":
        n = len(addresses)
        share = np.zeros(n) if max_market_share is None else np.asarray(max_market_share, dtype=float)
        return cls(list(addresses), np.asarray(f2, dtype=float), np.asarray(f9, dtype=float),
                   np.asarray(notional, dtype=float), share)


@dataclass
class Cutoffs:
    hfo_f2: float
    hfo_f9: float
    hbo_f9: float
    power_f2: float
    power_notional: float


def fit_cutoffs(inp: TierInputs, th: TierThresholds) -> Cutoffs:
    return Cutoffs(
        hfo_f2=nearest_rank(inp.f2, th.hfo_f2),
        hfo_f9=nearest_rank(inp.f9, th.hfo_f9),
        hbo_f9=nearest_rank(inp.f9, th.hbo_f9),
        power_f2=nearest_rank(inp.f2, th.power_f2),
        power_notional=nearest_rank(inp.notional, th.power_notional),
    )


def _tier_array(inp: TierInputs, cut: Cutoffs, th: TierThresholds) -> np.ndarray:
    tiers = np.full(len(inp.addresses), ACTIVE_RETAIL, dtype=object)
    hfo = (inp.f2 >= cut.hfo_f2) & (inp.f9 >= cut.hfo_f9)
    hbo = ~hfo & (inp.f9 >= cut.hbo_f9)
    power = ~hfo & ~hbo & (inp.f2 >= cut.power_f2) & (inp.notional >= cut.power_notional)
    episodic = ~hfo & ~hbo & ~power & (inp.notional < th.episodic_cap)
    tiers[hfo] = HFO
    tiers[hbo] = HBO
    tiers[power] = POWER
    tiers[episodic] = EPISODIC_RETAIL
    return tiers


def classify_tiers(inp: TierInputs, th: TierThresholds = TierThresholds()) -> dict[str, TierLabel]:
    """Precedence HFO > HBO > POWER > EPISODIC_RETAIL > ACTIVE_RETAIL; whale is an overlay.

    Cutoffs are computed on ``inp`` itself, which should be the post-exclusion,
    post-activity-filter population. Comparisons are inclusive (>=).
    """
    cut = fit_cutoffs(inp, th)
    tiers = _tier_array(inp, cut, th)
    by_notional = inp.notional >= th.whale_notional
    if th.whale_single_market_share is None:
        by_share = np.zeros(len(inp.addresses), dtype=bool)
    else:
        by_share = inp.max_market_share >= th.whale_single_market_share
    return {
        a: TierLabel(str(t), bool(n or s), bool(n), bool(s))
        for a, t, n, s in zip(inp.addresses, tiers, by_notional, by_share)
    }


def tier_sensitivity(inp: TierInputs, f2_grid=(0.90, 0.95, 0.99), f9_grid=(0.90, 0.95, 0.99),
                     th: TierThresholds = TierThresholds()) -> dict:
    """Tier populations with the HFO f2 cutoff swept over rows and the HBO f9 cutoff over columns."""
    cells = []
    whale = int(np.count_nonzero(inp.notional >= th.whale_notional))
    for p2 in f2_grid:
        row = []
        for p9 in f9_grid:
            t = TierThresholds(**{**th.__dict__, "hfo_f2": p2, "hbo_f9": p9})
            tiers = _tier_array(inp, fit_cutoffs(inp, t), t)
            counts = {k: int(np.count_nonzero(tiers == k)) for k in TIERS}
            counts["WHALE"] = whale
            row.append(counts)
        cells.append(row)
    return {"f2_grid": list(f2_grid), "f9_grid": list(f9_grid), "cells": cells}


def crosstab(tier_labels: Mapping[str, TierLabel], cluster_labels: Mapping[str, int]) -> dict:
    """Tier x cluster counts over addresses present in both maps, plus a whale overlay row."""
    common = sorted(set(tier_labels) & set(cluster_labels))
    clusters = sorted({int(cluster_labels[a]) for a in common})
    col = {c: j for j, c in enumerate(clusters)}
    table = np.zeros((len(TIERS), len(clusters)), dtype=int)
    whale = np.zeros(len(clusters), dtype=int)
    row = {t: i for i, t in enumerate(TIERS)}
    for a in common:
        j = col[int(cluster_labels[a])]
        table[row[tier_labels[a].tier], j] += 1
        if tier_labels[a].whale:
            whale[j] += 1
    return {
        "tiers": list(TIERS), "clusters": clusters, "counts": table.tolist(),
        "whale_row": whale.tolist(), "row_totals": table.sum(1).tolist(),
        "col_totals": table.sum(0).tolist(), "n": len(common),
    }


@dataclass
class ConcentrationStats:
    lorenz_x: np.ndarray
    lorenz_y: np.ndarray
    gini: float
    top_shares: dict = field(default_factory=dict)
    group_shares: dict = field(default_factory=dict)

    def lorenz_points(self, max_points: int = 201) -> list[list[float]]:
        idx = np.unique(np.linspace(0, self.lorenz_x.size - 1, min(max_points, self.lorenz_x.size)).astype(int))
        return [[float(self.lorenz_x[i]), float(self.lorenz_y[i])] for i in idx]


def lorenz_curve(values) -> tuple[np.ndarray, np.ndarray]:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0 or np.any(v < 0):
        raise ValueError("need a non-empty sample of non-negative values")
    total = v.sum()
    x = np.arange(v.size + 1) / v.size
    if total <= 0:
        return x, x.copy()
    y = np.concatenate([[0.0], np.cumsum(v) / total])
    y[-1] = 1.0
    return x, y


def gini(values) -> float:
    x, y = lorenz_curve(values)
    area = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))
    return 1.0 - 2.0 * area


def top_share(values, top_fraction: float) -> float:
    """Share of the total held by the top ``top_fraction`` of holders."""
    v = np.sort(np.asarray(values, dtype=float))[::-1]
    k = int(round(top_fraction * v.size))
    total = v.sum()
    return float(v[:k].sum() / total) if total > 0 else 0.0


def concentration(notional: Mapping[str, float], grouping: Mapping[str, str] | None = None,
                  top_fractions=(0.01, 0.05, 0.10, 0.126)) -> ConcentrationStats:
    addrs = sorted(notional)
    vals = np.array([notional[a] for a in addrs], dtype=float)
    x, y = lorenz_curve(vals)
    g = 1.0 - 2.0 * float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))
    tops = {str(f): top_share(vals, f) for f in top_fractions}
    groups = {}
    if grouping is not None:
        total = vals.sum()
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        for a, v in zip(addrs, vals):
            key = grouping.get(a)
            if key is None:
                continue
            sums[key] = sums.get(key, 0.0) + v
            counts[key] = counts.get(key, 0) + 1
        groups = {k: {"n": counts[k], "notional": sums[k],
                      "notional_share": sums[k] / total if total > 0 else 0.0,
                      "population_share": counts[k] / len(addrs)}
                  for k in sorted(sums)}
    return ConcentrationStats(x, y, g, tops, groups)
