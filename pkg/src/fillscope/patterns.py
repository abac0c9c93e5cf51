"""Fill-side manipulation-candidate scans and the negRisk group-sum deviation.

Every output here is a candidate list, an upper bound on the behavior it
names. None of it establishes wash trading or arbitrage intent.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import AddressAggregate
from .ingest import BUY, SELL, FillRecord

WASH_GROSS_MIN = 1_000.0
WASH_NET_RATIO_MAX = 0.01
DELTA_WASH = 60.0
DELTA_ARB = 60.0
NEGRISK_THRESHOLD = 0.02


def _legs(records: Iterable[FillRecord]):
    """Yield (address, market, side, timestamp, notional_e6) for both counterparties."""
    for r in records:
        other = SELL if r.side == BUY else BUY
        yield r.taker, r.market_token, r.side, r.timestamp, r.notional_e6
        yield r.maker, r.market_token, other, r.timestamp, r.notional_e6


# ---- wash -------------------------------------------------------------------

@dataclass
class WashCandidate:
    address: str
    gross_volume: float
    net_ratio: float
    intra_window_pairs: int


def count_opposite_pairs(buys: Sequence[float], sells: Sequence[float], delta: float) -> int:
    """Greedy two-pointer matching of buys to sells at most ``delta`` seconds apart.

    Both inputs must be sorted. Each leg is used at most once; the earliest
    unmatched leg is always paired first.
    """
    i = j = pairs = 0
    while i < len(buys) and j < len(sells):
        if abs(buys[i] - sells[j]) <= delta:
            pairs += 1
            i += 1
            j += 1
        elif buys[i] < sells[j]:
            i += 1
        else:
            j += 1
    return pairs


def intra_window_pairs(records: Iterable[FillRecord], delta: float = DELTA_WASH,
                       addresses: set[str] | None = None) -> dict[str, int]:
    legs: dict[tuple[str, str], dict[str, list[int]]] = defaultdict(lambda: {BUY: [], SELL: []})
    for addr, market, side, ts, _ in _legs(records):
        if addresses is None or addr in addresses:
            legs[(addr, market)][side].append(ts)
    out: dict[str, int] = defaultdict(int)
    for (addr, _), sides in legs.items():
        out[addr] += count_opposite_pairs(sorted(sides[BUY]), sorted(sides[SELL]), delta)
    return dict(out)


def detect_wash(aggregates: Mapping[str, AddressAggregate], records: Sequence[FillRecord],
                gross_min: float = WASH_GROSS_MIN, net_ratio_max: float = WASH_NET_RATIO_MAX,
                delta_wash: float = DELTA_WASH) -> list[WashCandidate]:
    """Addresses with near-zero net filled position despite substantial gross volume."""
    hits = {}
    for addr, g in aggregates.items():
        gross = g.total_notional_e6
        if gross <= 0 or gross / 1e6 < gross_min:
            continue
        ratio = abs(g.buy_e6 - g.sell_e6) / gross
        if ratio <= net_ratio_max:
            hits[addr] = (gross / 1e6, ratio)
    pairs = intra_window_pairs(records, delta_wash, set(hits))
    return [WashCandidate(a, hits[a][0], hits[a][1], pairs.get(a, 0)) for a in sorted(hits)]


def wash_summary(candidates: Sequence[WashCandidate], parameters: dict) -> dict:
    return {
        "label": "upper-bound wash-volume candidates",
        "n_candidates": len(candidates),
        "gross_volume": float(sum(c.gross_volume for c in candidates)),
        "intra_window_pairs": int(sum(c.intra_window_pairs for c in candidates)),
        "parameters": parameters,
    }


def wash_by_class(candidates: Sequence[WashCandidate], classes: Mapping[str, str]) -> dict[str, dict]:
    """Join candidates to caller-supplied class annotations."""
    out: dict[str, dict] = {}
    for c in candidates:
        k = classes.get(c.address, "UNANNOTATED")
        slot = out.setdefault(k, {"n": 0, "gross_volume": 0.0})
        slot["n"] += 1
        slot["gross_volume"] += c.gross_volume
    return dict(sorted(out.items()))


# ---- co-occurrence ----------------------------------------------------------

@dataclass
class CoOccurrenceGraph:
    nodes: set[str] = field(default_factory=set)
    fills: dict[tuple[str, str], int] = field(default_factory=dict)
    markets: dict[tuple[str, str], set] = field(default_factory=dict)

    def edge(self, a: str, b: str) -> tuple[str, str]:
        return (a, b) if a < b else (b, a)

    def shared_markets(self, a: str, b: str) -> int:
        return len(self.markets.get(self.edge(a, b), ()))


def co_occurrence(records: Iterable[FillRecord]) -> CoOccurrenceGraph:
    """Undirected counterparty graph; self-fills add a node but no edge."""
    g = CoOccurrenceGraph()
    fills: dict = defaultdict(int)
    markets: dict = defaultdict(set)
    for r in records:
        g.nodes.update((r.maker, r.taker))
        if r.maker == r.taker:
            continue
        e = g.edge(r.maker, r.taker)
        fills[e] += 1
        markets[e].add(r.market_token)
    g.fills = dict(fills)
    g.markets = dict(markets)
    return g


def connected_components(graph: CoOccurrenceGraph, min_edge_weight: int = 1) -> list[list[str]]:
    """Union-find over edges with at least ``min_edge_weight`` fills; singletons included."""
    parent = {n: n for n in graph.nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for (a, b), w in graph.fills.items():
        if w >= min_edge_weight:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    comps: dict[str, list[str]] = defaultdict(list)
    for n in graph.nodes:
        comps[find(n)].append(n)
    return sorted((sorted(c) for c in comps.values()), key=lambda c: (-len(c), c[0]))


def component_summary(components: Sequence[Sequence[str]]) -> dict:
    sizes = [len(c) for c in components]
    return {
        "n_components": len(sizes),
        "n_nontrivial": sum(1 for s in sizes if s > 1),
        "largest": max(sizes) if sizes else 0,
        "size_histogram": {str(k): sizes.count(k) for k in sorted(set(sizes))},
    }


# ---- cross-market pairs -----------------------------------------------------

def opposite_sides(side_a: str, side_b: str) -> bool:
    return side_a != side_b


def same_sell(side_a: str, side_b: str) -> bool:
    return side_a == SELL and side_b == SELL


SIGN_RULES = {"opposite": opposite_sides, "both_sell": same_sell}


@dataclass(frozen=True)
class PairEvent:
    address: str
    group: str
    market_a: str
    market_b: str
    side_a: str
    side_b: str
    t_a: int
    t_b: int


def cross_market_pairs(records: Iterable[FillRecord], related_map: Mapping[str, str],
                       delta_arb: float = DELTA_ARB, sign_rule: str = "opposite") -> list[PairEvent]:
    """Same-address legs on two different markets of one group within ``delta_arb``.

    Legs are scanned in time order per (address, group); each leg is paired
    at most once, with the earliest eligible later leg on another market.
    """
    rule = SIGN_RULES[sign_rule]
    legs: dict[tuple[str, str], list] = defaultdict(list)
    for addr, market, side, ts, _ in _legs(records):
        grp = related_map.get(market)
        if grp is not None:
            legs[(addr, grp)].append((ts, market, side))
    events = []
    for (addr, grp), seq in sorted(legs.items()):
        seq.sort()
        used = [False] * len(seq)
        for i, (ti, mi, si) in enumerate(seq):
            if used[i]:
                continue
            for j in range(i + 1, len(seq)):
                tj, mj, sj = seq[j]
                if tj - ti > delta_arb:
                    break
                if used[j] or mj == mi or not rule(si, sj):
                    continue
                used[i] = used[j] = True
                events.append(PairEvent(addr, grp, mi, mj, si, sj, ti, tj))
                break
    return events


# ---- negRisk ----------------------------------------------------------------

@dataclass
class NegRiskEpisode:
    start: float
    end: float | None
    duration: float | None
    peak: float


@dataclass
class NegRiskResult:
    group: str
    times: np.ndarray
    deviation: np.ndarray
    episodes: list[NegRiskEpisode]
    integrated_abs: float


def negrisk_deviation(group: str, timeline: Mapping[str, Sequence[tuple[float, float]]],
                      threshold: float = NEGRISK_THRESHOLD) -> NegRiskResult:
    """Sum of member prices minus one, on the union of member price-change times.

    ``timeline`` maps each member market to (time, price) points. Each member
    carries its last observation forward; sampling starts once every member
    has a price. An episode opens when |dev| rises above ``threshold`` and its
    correction time is how long until it falls back to or below it.
    """
    if len(timeline) < 2:
        raise ValueError("a negRisk group needs at least two members")
    series = {m: sorted(pts) for m, pts in timeline.items()}
    times = sorted({t for pts in series.values() for t, _ in pts})
    current: dict[str, float] = {}
    cursor = {m: 0 for m in series}
    ts, dev = [], []
    for t in times:
        for m, pts in series.items():
            while cursor[m] < len(pts) and pts[cursor[m]][0] <= t:
                current[m] = pts[cursor[m]][1]
                cursor[m] += 1
        if len(current) == len(series):
            ts.append(t)
            dev.append(sum(current.values()) - 1.0)
    ts_a = np.asarray(ts, dtype=float)
    dev_a = np.asarray(dev, dtype=float)

    episodes = []
    open_at = None
    peak = 0.0
    for t, d in zip(ts_a, dev_a):
        above = abs(d) > threshold
        if open_at is None and above:
            open_at, peak = t, d
        elif open_at is not None and above:
            peak = d if abs(d) > abs(peak) else peak
        elif open_at is not None:
            episodes.append(NegRiskEpisode(float(open_at), float(t), float(t - open_at), float(peak)))
            open_at = None
    if open_at is not None:
        episodes.append(NegRiskEpisode(float(open_at), None, None, float(peak)))
    integrated = float(np.sum(np.abs(dev_a[:-1]) * np.diff(ts_a))) if ts_a.size > 1 else 0.0
    return NegRiskResult(group, ts_a, dev_a, episodes, integrated)


def negrisk_timelines(records: Iterable[FillRecord], groups: Mapping[str, str]) -> dict[str, dict[str, list]]:
    """group -> member -> [(timestamp, fill price)] from the corpus."""
    out: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for r in sorted(records, key=lambda r: (r.timestamp, r.block_number, r.log_index)):
        g = groups.get(r.market_token)
        if g is not None:
            out[g][r.market_token].append((r.timestamp, r.price))
    return {g: dict(v) for g, v in out.items()}


# ---- book swings ------------------------------------------------------------

def swing_report(per_market_swings: Mapping[str, Sequence[dict]]) -> dict:
    hit = {m: list(v) for m, v in sorted(per_market_swings.items()) if v}
    return {
        "n_markets_with_swings": len(hit),
        "n_events": sum(len(v) for v in hit.values()),
        "max_abs_move": max((abs(e["move"]) for v in hit.values() for e in v), default=0.0),
        "markets": {m: len(v) for m, v in hit.items()},
    }
