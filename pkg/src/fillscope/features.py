"""Per-address aggregation and the six-feature fill-side behavioral vector.

Aggregation is a commutative-monoid fold over fills. USDC sums stay in 6-decimal
integer units, so partition-and-merge results are bit-identical to a single
sequential pass for any bucket count.
"""

from __future__ import annotations

import json
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .gates import FILL_FEATURES, GateReport
from .ingest import BUY, USDC_SCALE, FillRecord

FEATURE_NAMES = FILL_FEATURES
HOURS_PER_DAY = 24


class DegenerateFeature(ValueError):
    pass


class FeatureNotEnabled(RuntimeError):
    pass


@dataclass
class AddressAggregate:
    address: str
    n_fills: int = 0
    buy_e6: int = 0
    sell_e6: int = 0
    per_market_fill_counts: Counter = field(default_factory=Counter)
    per_market_notional_e6: Counter = field(default_factory=Counter)
    hourly_histogram: list = field(default_factory=lambda: [0] * HOURS_PER_DAY)
    hour_ids: set = field(default_factory=set)
    first_ts: int | None = None
    last_ts: int | None = None

    @property
    def total_notional_e6(self) -> int:
        return self.buy_e6 + self.sell_e6

    @property
    def buy_volume(self) -> float:
        return self.buy_e6 / USDC_SCALE

    @property
    def sell_volume(self) -> float:
        return self.sell_e6 / USDC_SCALE

    @property
    def total_notional(self) -> float:
        return self.total_notional_e6 / USDC_SCALE

    @property
    def active_hours(self) -> int:
        return len(self.hour_ids)

    @property
    def n_markets(self) -> int:
        return len(self.per_market_fill_counts)

    def add(self, market: str, is_buy: bool, notional_e6: int, ts: int) -> None:
        self.n_fills += 1
        if is_buy:
            self.buy_e6 += notional_e6
        else:
            self.sell_e6 += notional_e6
        self.per_market_fill_counts[market] += 1
        self.per_market_notional_e6[market] += notional_e6
        self.hourly_histogram[(ts // 3600) % HOURS_PER_DAY] += 1
        self.hour_ids.add(ts // 3600)
        self.first_ts = ts if self.first_ts is None else min(self.first_ts, ts)
        self.last_ts = ts if self.last_ts is None else max(self.last_ts, ts)

    def merge(self, other: "AddressAggregate") -> "AddressAggregate":
        if other.address != self.address:
            raise ValueError("cannot merge aggregates of different addresses")
        out = AddressAggregate(self.address)
        out.n_fills = self.n_fills + other.n_fills
        out.buy_e6 = self.buy_e6 + other.buy_e6
        out.sell_e6 = self.sell_e6 + other.sell_e6
        out.per_market_fill_counts = self.per_market_fill_counts + other.per_market_fill_counts
        out.per_market_notional_e6 = self.per_market_notional_e6 + other.per_market_notional_e6
        out.hourly_histogram = [a + b for a, b in zip(self.hourly_histogram, other.hourly_histogram)]
        out.hour_ids = self.hour_ids | other.hour_ids
        firsts = [t for t in (self.first_ts, other.first_ts) if t is not None]
        lasts = [t for t in (self.last_ts, other.last_ts) if t is not None]
        out.first_ts = min(firsts) if firsts else None
        out.last_ts = max(lasts) if lasts else None
        return out

    def state(self) -> tuple:
        """Hashable snapshot used for exact equality checks."""
        return (
            self.address, self.n_fills, self.buy_e6, self.sell_e6,
            tuple(sorted((k, v) for k, v in self.per_market_fill_counts.items() if v)),
            tuple(sorted((k, v) for k, v in self.per_market_notional_e6.items() if v)),
            tuple(self.hourly_histogram), tuple(sorted(self.hour_ids)),
            self.first_ts, self.last_ts,
        )


def aggregate(records: Iterable[FillRecord]) -> dict[str, AddressAggregate]:
    """Fold fills into per-address aggregates.

    Each fill updates both counterparties: the taker with the recorded side
    and the maker with the opposite side.
    """
    aggs: dict[str, AddressAggregate] = {}
    for r in records:
        taker_buys = r.side == BUY
        for addr, is_buy in ((r.taker, taker_buys), (r.maker, not taker_buys)):
            agg = aggs.get(addr)
            if agg is None:
                agg = aggs[addr] = AddressAggregate(addr)
            agg.add(r.market_token, is_buy, r.notional_e6, r.timestamp)
    return aggs


def bucket_of(address: str, n_buckets: int) -> int:
    return zlib.crc32(address.encode("ascii")) % n_buckets


def merge_aggregates(parts: Iterable[Mapping[str, AddressAggregate]]) -> dict[str, AddressAggregate]:
    out: dict[str, AddressAggregate] = {}
    for part in parts:
        for addr, agg in part.items():
            out[addr] = out[addr].merge(agg) if addr in out else agg
    return dict(sorted(out.items()))


def aggregate_partitioned(records: Sequence[FillRecord], n_buckets: int = 8) -> dict[str, AddressAggregate]:
    """Aggregate by address-hash bucket and merge; equals :func:`aggregate`.

    A fill is routed to every bucket owning one of its counterparties, and each
    bucket keeps only the aggregates it owns.
    """
    buckets: list[list[FillRecord]] = [[] for _ in range(n_buckets)]
    for r in records:
        owners = {bucket_of(r.maker, n_buckets), bucket_of(r.taker, n_buckets)}
        for b in owners:
            buckets[b].append(r)
    parts = []
    for b, recs in enumerate(buckets):
        part = aggregate(recs)
        parts.append({a: g for a, g in part.items() if bucket_of(a, n_buckets) == b})
    return merge_aggregates(parts)


def activity_filter(aggs: Mapping[str, AddressAggregate], min_fills: int = 5) -> dict[str, AddressAggregate]:
    if min_fills < 1:
        raise ValueError("min_fills must be >= 1")
    return {a: g for a, g in aggs.items() if g.n_fills >= min_fills}


def market_totals(records: Iterable[FillRecord]) -> dict[str, int]:
    """Per-market notional, each fill counted once."""
    totals: Counter = Counter()
    for r in records:
        totals[r.market_token] += r.notional_e6
    return dict(totals)


def max_market_share(agg: AddressAggregate, totals: Mapping[str, int]) -> float:
    best = 0.0
    for m, v in agg.per_market_notional_e6.items():
        t = totals.get(m, 0)
        if t > 0:
            best = max(best, v / t)
    return best


@dataclass
class FeatureVector:
    address: str
    f2: float
    f3: float
    f5: float
    f6: float
    f7: float
    f9: float
    degenerate_notional: bool = False

    def raw(self) -> list[float]:
        return [self.f2, self.f3, self.f5, self.f6, self.f7, self.f9]


def compute_features(agg: AddressAggregate, gates: GateReport | None = None,
                     hhi_weight: str = "count") -> FeatureVector:
    """Raw six-feature vector for one address.

    f2 and f9 use natural logs; f3 is log10 of the mean fill notional, falling
    back to log10(1 + mean) (flagged) when the mean is not positive.
    """
    if gates is not None:
        missing = [f for f in FEATURE_NAMES if not gates.is_enabled(f)]
        if missing:
            raise FeatureNotEnabled(f"features withdrawn by gate report: {missing}")
    n = agg.n_fills
    if n < 1:
        raise ValueError(f"{agg.address} has no fills")

    f2 = math.log1p(n / agg.active_hours)

    mean_notional = agg.total_notional_e6 / n / USDC_SCALE
    degenerate = mean_notional <= 0
    f3 = math.log10(1.0 + mean_notional) if degenerate else math.log10(mean_notional)

    gross = agg.buy_e6 + agg.sell_e6
    f5 = 0.0 if gross == 0 else (agg.buy_e6 - agg.sell_e6) / gross

    if hhi_weight == "count":
        weights, denom = agg.per_market_fill_counts.values(), n
    elif hhi_weight == "notional":
        weights, denom = agg.per_market_notional_e6.values(), agg.total_notional_e6
    else:
        raise ValueError(f"unknown hhi weighting {hhi_weight!r}")
    if denom > 0:
        f6 = sum((w / denom) ** 2 for w in weights)
    else:
        f6 = sum((1 / agg.n_markets) ** 2 for _ in range(agg.n_markets))

    f7 = 0.0
    for c in agg.hourly_histogram:
        if c:
            p = c / n
            f7 -= p * math.log(p)
    f7 = max(f7, 0.0)

    f9 = math.log1p(agg.n_markets)
    return FeatureVector(agg.address, f2, f3, f5, f6, f7, f9, degenerate)


def feature_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    return np.array([v.raw() for v in vectors], dtype=float).reshape(len(vectors), len(FEATURE_NAMES))


@dataclass
class ScalerState:
    mode: str                   # "winsor_z" or "robust"
    caps: list[float | None]
    centers: list[float]
    scales: list[float]
    n: int
    upper_quantile: float = 0.995

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerState":
        return cls(**d)


def winsorize_upper(x: np.ndarray, caps: Sequence[float | None]) -> np.ndarray:
    out = np.array(x, dtype=float, copy=True)
    for j, cap in enumerate(caps):
        if cap is not None:
            np.minimum(out[:, j], cap, out=out[:, j])
    return out


def fit_scaler(raw: np.ndarray, mode: str = "winsor_z", upper_quantile: float = 0.995) -> ScalerState:
    """Fit per-feature preprocessing.

    ``winsor_z`` clips each column above at its ``upper_quantile`` (linear
    interpolation) and z-scores with the post-clip mean and population std.
    ``robust`` centers on the median and divides by the IQR, without clipping.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] < 2:
        raise DegenerateFeature("need at least two rows to fit a scaler")
    caps: list[float | None] = []
    centers, scales = [], []
    for j in range(raw.shape[1]):
        col = raw[:, j]
        if np.unique(col).size < 2:
            raise DegenerateFeature(f"feature column {j} is constant")
        if mode == "winsor_z":
            cap = float(np.quantile(col, upper_quantile))
            clipped = np.minimum(col, cap)
            sd = float(clipped.std())
            if not sd > 0:
                raise DegenerateFeature(f"feature column {j} has zero variance after winsorization")
            caps.append(cap)
            centers.append(float(clipped.mean()))
            scales.append(sd)
        elif mode == "robust":
            q1, med, q3 = np.quantile(col, [0.25, 0.5, 0.75])
            iqr = float(q3 - q1)
            if not iqr > 0:
                raise DegenerateFeature(f"feature column {j} has zero IQR")
            caps.append(None)
            centers.append(float(med))
            scales.append(iqr)
        else:
            raise ValueError(f"unknown scaler mode {mode!r}")
    return ScalerState(mode, caps, centers, scales, int(raw.shape[0]), upper_quantile)


def apply_scaler(state: ScalerState, raw: np.ndarray) -> np.ndarray:
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    clipped = winsorize_upper(raw, state.caps)
    return (clipped - np.asarray(state.centers)) / np.asarray(state.scales)
