"""Group volume shares crossed against the market metric panel.

Spearman correlations with a single Benjamini-Hochberg family, BCa bootstrap
intervals and Mann-Whitney U tests.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm, rankdata, t as student_t

from .ingest import FillRecord

UNKNOWN = "UNKNOWN"


class DegenerateResample(ValueError):
    pass


# ---- shares -----------------------------------------------------------------

@dataclass(frozen=True)
class ShareRow:
    market: str
    group: str
    volume_share: float


def archetype_shares(records: Iterable[FillRecord], labels: Mapping[str, str],
                     default_group: str = UNKNOWN) -> list[ShareRow]:
    """Per-market notional share of each group, counting each counterparty once per fill.

    A fill credits its notional to the maker's group and to the taker's group,
    so the per-market denominator is twice the market's fill notional.
    """
    by_market: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for r in records:
        for addr in (r.maker, r.taker):
            by_market[r.market_token][labels.get(addr, default_group)] += r.notional_e6
    rows = []
    for m in sorted(by_market):
        groups = by_market[m]
        total = sum(groups.values())
        if total <= 0:
            continue
        for g in sorted(groups):
            rows.append(ShareRow(m, g, groups[g] / total))
    return rows


def share_matrix(rows: Sequence[ShareRow]) -> dict[str, dict[str, float]]:
    """group -> market -> share."""
    out: dict[str, dict[str, float]] = defaultdict(dict)
    for r in rows:
        out[r.group][r.market] = r.volume_share
    return dict(out)


# ---- rank statistics --------------------------------------------------------

def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size or x.size < 3:
        raise ValueError("spearman needs two equal-length samples with n >= 3")
    return _pearson(rankdata(x), rankdata(y))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if den == 0:
        return float("nan")
    return float(np.clip(np.dot(a, b) / den, -1.0, 1.0))


def _spearman_rows(xr: np.ndarray, yr: np.ndarray) -> np.ndarray:
    """Row-wise Pearson of already-ranked matrices."""
    xc = xr - xr.mean(axis=1, keepdims=True)
    yc = yr - yr.mean(axis=1, keepdims=True)
    den = np.sqrt(np.sum(xc * xc, axis=1) * np.sum(yc * yc, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.clip(np.sum(xc * yc, axis=1) / den, -1.0, 1.0)


def spearman_pvalue(rho: float, n: int) -> float:
    """Two-sided p-value from t = rho * sqrt((n-2)/(1-rho^2)) on n-2 degrees of freedom."""
    if n < 3:
        raise ValueError("need n >= 3")
    if not np.isfinite(rho):
        return float("nan")
    if abs(rho) >= 1.0:
        return 0.0
    tstat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(2.0 * student_t.sf(abs(tstat), n - 2))


def bh_fdr(p_values, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up. Returns (q-values, rejection mask) in input order."""
    p = np.asarray(p_values, dtype=float)
    m = p.size
    if m == 0:
        return np.empty(0), np.empty(0, dtype=bool)
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    q = np.empty(m)
    q[order] = q_sorted
    return q, q <= alpha


# ---- bootstrap --------------------------------------------------------------

@dataclass
class BcaInterval:
    estimate: float
    low: float
    high: float
    z0: float
    acceleration: float
    degenerate: bool = False


def _jackknife_spearman(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = x.size
    keep = ~np.eye(n, dtype=bool)
    xs = x[np.nonzero(keep)[1]].reshape(n, n - 1)
    ys = y[np.nonzero(keep)[1]].reshape(n, n - 1)
    return _spearman_rows(rankdata(xs, axis=1), rankdata(ys, axis=1))


def bca_ci(x, y, iterations: int = 2000, level: float = 0.95,
           seed: int | np.random.SeedSequence = 0, chunk: int = 500) -> BcaInterval:
    """BCa interval for Spearman rho with paired case resampling.

    z0 counts ties at half weight. Acceleration comes from the jackknife.
    Resamples whose ranks are constant are dropped.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    theta = spearman(x, y)
    rng = np.random.default_rng(seed)
    boots = []
    for start in range(0, iterations, chunk):
        b = min(chunk, iterations - start)
        idx = rng.integers(0, n, size=(b, n))
        boots.append(_spearman_rows(rankdata(x[idx], axis=1), rankdata(y[idx], axis=1)))
    stats = np.concatenate(boots)
    stats = stats[np.isfinite(stats)]
    if stats.size == 0 or np.ptp(stats) == 0:
        return BcaInterval(theta, theta, theta, 0.0, 0.0, degenerate=True)

    frac = (np.count_nonzero(stats < theta) + 0.5 * np.count_nonzero(stats == theta)) / stats.size
    frac = min(max(frac, 1.0 / (stats.size + 1)), stats.size / (stats.size + 1))
    z0 = float(norm.ppf(frac))

    jack = _jackknife_spearman(x, y)
    jack = jack[np.isfinite(jack)]
    d = jack.mean() - jack
    den = 6.0 * float(np.sum(d * d)) ** 1.5
    acc = float(np.sum(d ** 3) / den) if den > 0 else 0.0

    alpha = (1.0 - level) / 2.0
    ends = []
    for z_a in (norm.ppf(alpha), norm.ppf(1.0 - alpha)):
        adj = z0 + (z0 + z_a) / (1.0 - acc * (z0 + z_a))
        ends.append(float(norm.cdf(adj)))
    lo, hi = np.quantile(stats, ends)
    return BcaInterval(theta, float(lo), float(hi), z0, acc)


# ---- Mann-Whitney -----------------------------------------------------------

@dataclass
class MannWhitney:
    u: float
    p_value: float
    method: str


def _exact_u_distribution(ranks2: np.ndarray, n1: int) -> dict[float, int]:
    """Counts of the rank sum of group 1 over all C(n, n1) assignments, by subset DP."""
    # dp[k] maps rank-sum (doubled to stay integral with midranks) -> count
    dp = [defaultdict(int) for _ in range(n1 + 1)]
    dp[0][0] = 1
    for r in ranks2:
        for k in range(min(n1, len(ranks2)), 0, -1):
            for s, c in list(dp[k - 1].items()):
                dp[k][s + int(r)] += c
    return dict(dp[n1])


def mann_whitney_u(a, b, method: str = "asymptotic", continuity: bool = True) -> MannWhitney:
    """U statistic of sample ``a`` and a two-sided p-value.

    ``asymptotic`` uses the normal approximation with tie-corrected variance;
    ``exact`` enumerates the permutation distribution of the (mid)rank sum.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    ranks = rankdata(np.concatenate([a, b]))
    r1 = float(ranks[:n1].sum())
    u1 = r1 - n1 * (n1 + 1) / 2.0
    mean_u = n1 * n2 / 2.0
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        dist = _exact_u_distribution(doubled, n1)
        total = sum(dist.values())
        obs = int(round(2 * r1))
        centre = n1 * (n1 + n2 + 1)          # doubled expected rank sum
        dev = abs(obs - centre)
        extreme = sum(c for s, c in dist.items() if abs(s - centre) >= dev)
        return MannWhitney(u1, min(1.0, extreme / total), "exact")
    if method != "asymptotic":
        raise ValueError(f"unknown method {method!r}")
    n = n1 + n2
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(counts ** 3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return MannWhitney(u1, 1.0, "asymptotic")
    diff = abs(u1 - mean_u)
    if continuity:
        diff = max(diff - 0.5, 0.0)
    z = diff / math.sqrt(var)
    return MannWhitney(u1, float(min(1.0, 2.0 * norm.sf(z))), "asymptotic")


# ---- run --------------------------------------------------------------------

@dataclass
class BilateralResult:
    group: str
    metric: str
    n: int
    rho: float | None
    p_value: float | None
    q_value: float | None
    significant: bool
    ci_low: float | None
    ci_high: float | None
    degenerate_ci: bool = False

    COLUMNS = ("group", "metric", "n", "rho", "p_value", "q_value", "significant",
               "ci_low", "ci_high", "degenerate_ci")

    def to_line(self) -> str:
        d = asdict(self)
        out = []
        for c in self.COLUMNS:
            v = d[c]
            out.append("" if v is None else ("1" if v is True else "0" if v is False else
                                             repr(v) if isinstance(v, float) else str(v)))
        return "\t".join(out)


def pair_seed(master: int, group: str, metric: str) -> np.random.SeedSequence:
    """Independent stream per (group, metric), stable under reordering or parallel execution."""
    key = [ord(c) for c in f"{group}\x00{metric}"]
    return np.random.SeedSequence([int(master)] + key)


def run_bilateral(shares: Mapping[str, Mapping[str, float]],
                  metrics: Mapping[str, Mapping[str, float | None]],
                  alpha: float = 0.05, seed: int = 0, iterations: int = 2000,
                  level: float = 0.95, min_n: int = 3) -> list[BilateralResult]:
    """One result per (group, metric).

    ``shares`` is group -> market -> share and ``metrics`` is metric -> market ->
    value. A pair uses markets where the group's share is nonzero and the
    metric is non-null. All computable p-values form one BH family.
    """
    results: list[BilateralResult] = []
    for g in sorted(shares):
        gs = shares[g]
        for m in sorted(metrics):
            ms = metrics[m]
            markets = sorted(k for k, v in gs.items() if v > 0 and ms.get(k) is not None
                             and np.isfinite(ms[k]))
            n = len(markets)
            if n < min_n:
                results.append(BilateralResult(g, m, n, None, None, None, False, None, None))
                continue
            x = np.array([gs[k] for k in markets])
            y = np.array([ms[k] for k in markets], dtype=float)
            rho = spearman(x, y)
            if not np.isfinite(rho):
                results.append(BilateralResult(g, m, n, None, None, None, False, None, None, True))
                continue
            ci = bca_ci(x, y, iterations=iterations, level=level, seed=pair_seed(seed, g, m))
            results.append(BilateralResult(g, m, n, rho, spearman_pvalue(rho, n), None, False,
                                           ci.low, ci.high, ci.degenerate))
    tested = [r for r in results if r.p_value is not None]
    q, sig = bh_fdr([r.p_value for r in tested], alpha)
    for r, qi, si in zip(tested, q, sig):
        r.q_value = float(qi)
        r.significant = bool(si)
    return results


def summarize(results: Sequence[BilateralResult], alpha: float) -> dict:
    tested = [r for r in results if r.p_value is not None]
    return {
        "n_results": len(results),
        "n_tested": len(tested),
        "n_significant": sum(r.significant for r in results),
        "alpha": alpha,
        "family": "single BH family over all tested pairs",
    }


def write_results(results: Sequence[BilateralResult], path, summary: dict | None = None) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(BilateralResult.COLUMNS) + "\n")
        for r in results:
            fh.write(r.to_line() + "\n")
    if summary is not None:
        with open(str(path).rsplit(".", 1)[0] + ".json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)


def group_comparisons(shares: Mapping[str, Mapping[str, float]], metric: Mapping[str, float | None],
                      groups: Sequence[str] | None = None, dominance: float = 0.5) -> list[dict]:
    """Mann-Whitney on a metric between markets dominated by each pair of groups."""
    groups = sorted(shares) if groups is None else list(groups)
    dominated = {g: [metric[m] for m, s in shares[g].items()
                     if s >= dominance and metric.get(m) is not None] for g in groups}
    out = []
    for g1, g2 in combinations(groups, 2):
        a, b = dominated[g1], dominated[g2]
        if not a or not b:
            continue
        mw = mann_whitney_u(a, b)
        out.append({"group_a": g1, "group_b": g2, "n_a": len(a), "n_b": len(b),
                    "u": mw.u, "p_value": mw.p_value})
    return out
