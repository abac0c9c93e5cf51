"""Deterministic synthetic fill corpora with planted structure and ground truth.

Every planted address draws from its own seed stream, so its fills do not
depend on how many other addresses are planted. Planted addresses trade
against "filler" counterparties that stay on one side and are used at most
four times each, so the default activity filter (5 fills) removes them and
they never look like wash candidates.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gates import ONCHAIN_CLOB
from .ingest import BUY, SELL, USDC_SCALE, FillRecord, write_corpus
from .micropanel import MarketSeries
from .tiers import ACTIVE_RETAIL, EPISODIC_RETAIL, HBO, HFO, POWER

HOUR = 3600
BLOCK_TIME = 2
GENESIS_BLOCK = 50_000_000

# fills, active hours, markets, per-fill notional (USDC); ACTIVE uses a total band
TIER_BANDS = {
    HFO: dict(fills=(240, 300), hours=(2, 2), markets=(25, 50), per_fill=(5.0, 20.0)),
    POWER: dict(fills=(60, 80), hours=(2, 3), markets=(1, 1), per_fill=(1500.0, 3000.0)),
    HBO: dict(fills=(200, 240), hours=(30, 40), markets=(150, 200), per_fill=(5.0, 35.0)),
    EPISODIC_RETAIL: dict(fills=(5, 9), hours=(3, 4), markets=(1, 3), per_fill=(5.0, 500.0)),
    ACTIVE_RETAIL: dict(fills=(20, 30), hours=None, markets=(8, 20), total=(12_000.0, 30_000.0)),
}


@dataclass
class SynthSpec:
    seed: int = 7
    tiers: dict = field(default_factory=lambda: {
        HFO: 80, POWER: 240, HBO: 80, EPISODIC_RETAIL: 1260, ACTIVE_RETAIL: 340})
    n_markets: int = 250
    start: int = 1_699_999_200          # hour-aligned
    duration_hours: int = 72
    whales: int = 5                     # POWER addresses scaled past $1M
    buy_bias: float = 0.75
    wash_ring: int = 6
    wash_round_trips: int = 30
    wash_notional: float = 500.0
    directional: int = 10
    arb_bots: int = 3
    arb_events_per_bot: int = 8
    negrisk_groups: int = 2
    negrisk_members: int = 3
    negrisk_pulses: int = 3
    hawkes_markets: int = 2
    hawkes_eta: float = 0.5
    hawkes_mu: float = 0.01             # events / second
    hawkes_beta: float = 0.02
    hawkes_horizon: float = 20_000.0
    impact_markets: int = 2
    impact_slope: float = 2e-5          # price per USDC of signed volume
    impact_bins: int = 40
    impact_noise: float = 0.0
    swing_markets: int = 3
    swings_per_market: int = 2

    def validate(self) -> None:
        counts = [self.n_markets, self.duration_hours, self.whales, self.wash_ring, self.directional,
                  self.arb_bots, self.negrisk_groups, self.hawkes_markets, self.impact_markets,
                  self.swing_markets, *self.tiers.values()]
        if any(c < 0 for c in counts):
            raise ValueError("counts must be non-negative")
        if not 0 <= self.buy_bias <= 1 or not 0 <= self.hawkes_eta < 1:
            raise ValueError("probabilities out of range")
        if self.wash_ring == 1:
            raise ValueError("a wash ring needs at least two addresses")
        if self.negrisk_groups and self.negrisk_members < 2:
            raise ValueError("negRisk groups need at least two members")
        if self.whales > self.tiers.get(POWER, 0):
            raise ValueError("whales are planted inside the POWER tier")
        if self.tiers.get(HBO, 0) and self.n_markets < TIER_BANDS[HBO]["markets"][1]:
            raise ValueError("HBO band needs at least 200 markets")
        if self.start % HOUR:
            raise ValueError("start must be hour-aligned")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        base = cls()
        kw = {k: v for k, v in d.items() if k in base.__dict__}
        if "tiers" in kw:
            kw["tiers"] = {**base.tiers, **kw["tiers"]}
        return cls(**kw)


@dataclass
class GroundTruth:
    tiers: dict = field(default_factory=dict)
    whales: list = field(default_factory=list)
    wash: list = field(default_factory=list)
    directional: list = field(default_factory=list)
    arb_pairs: list = field(default_factory=list)
    impact_slopes: dict = field(default_factory=dict)
    hawkes: dict = field(default_factory=dict)
    negrisk: dict = field(default_factory=dict)
    swings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class SynthCorpus:
    records: list[FillRecord]
    truth: GroundTruth
    markets: dict               # market -> metadata (p_open, p_res, t_res, group, book)


def _hex(tag: str, n: int) -> str:
    return hashlib.sha256(tag.encode()).hexdigest()[:n]


def address(seed: int, kind: str, i: int) -> str:
    return "0x" + _hex(f"addr:{seed}:{kind}:{i}", 40)


def market_id(seed: int, kind: str, i: int) -> str:
    # decimal token ids like the venue's ERC-1155 ids
    return str(int(_hex(f"mkt:{seed}:{kind}:{i}", 30), 16))


def _rng(seed: int, *tags) -> np.random.Generator:
    key = [int(seed)] + [int(_hex(str(t), 8), 16) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(key))


def _e6(x: float) -> int:
    return int(round(x * USDC_SCALE))


class _Builder:
    """Accumulates raw legs and assigns counterparties, blocks and hashes at the end."""

    def __init__(self, seed: int):
        self.seed = seed
        self.legs: list[tuple] = []     # (ts, order, maker, taker, market, taker_side, price_e6, notional_e6)
        self._filler = 0
        self._current = {BUY: None, SELL: None}     # side -> [address, uses]

    def _new_filler(self) -> str:
        self._filler += 1
        return address(self.seed, "filler", self._filler)

    def filler(self, side: str) -> str:
        """A counterparty that only ever trades on ``side``, reused at most four times."""
        cur = self._current[side]
        if cur is None or cur[1] >= 4:
            cur = self._current[side] = [self._new_filler(), 0]
        cur[1] += 1
        return cur[0]

    def fresh_filler(self) -> str:
        return self._new_filler()

    def trade(self, who: str, side: str, market: str, ts: int, price: float, notional: float,
              as_taker: bool = True, counterparty: str | None = None) -> None:
        """``who`` ends up on ``side``; the counterparty takes the other side."""
        other = counterparty or self.filler(SELL if side == BUY else BUY)
        price_e6 = min(max(_e6(price), 1), USDC_SCALE - 1)
        if as_taker:
            rec = (who, other, side)
        else:
            rec = (other, who, SELL if side == BUY else BUY)
        maker, taker, taker_side = rec[1], rec[0], rec[2]
        self.legs.append((int(ts), len(self.legs), maker, taker, market, taker_side,
                          price_e6, max(_e6(notional), 1)))

    def records(self) -> list[FillRecord]:
        out = []
        per_block: dict[int, int] = {}
        for ts, order, maker, taker, market, side, p, v in sorted(self.legs):
            block = GENESIS_BLOCK + ts // BLOCK_TIME
            li = per_block.get(block, 0)
            per_block[block] = li + 1
            tx = "0x" + _hex(f"tx:{self.seed}:{order}", 64)
            out.append(FillRecord(block, tx, li, maker, taker, market, side, p, v, ts))
        return out


def _spread_hours(rng, n_fills: int, hours: list[int]) -> np.ndarray:
    """Fill timestamps covering every listed hour at least once."""
    slot = np.array([hours[i % len(hours)] for i in range(n_fills)])
    rng.shuffle(slot)
    return slot * HOUR + rng.integers(0, HOUR, size=n_fills)


def _plant_tier(b: _Builder, spec: SynthSpec, tier: str, i: int, markets: list[str],
                market_price: dict, whale: bool) -> str:
    rng = _rng(spec.seed, "tier", tier, i)
    band = TIER_BANDS[tier]
    addr = address(spec.seed, tier, i)
    n = int(rng.integers(band["fills"][0], band["fills"][1] + 1))
    n_mk = int(rng.integers(band["markets"][0], band["markets"][1] + 1))
    chosen = [markets[k] for k in rng.choice(len(markets), size=n_mk, replace=False)]
    base_hour = spec.start // HOUR
    if band["hours"] is None:                   # one fill per distinct hour
        hours = sorted(rng.choice(spec.duration_hours, size=n, replace=False) + base_hour)
    else:
        h = int(rng.integers(band["hours"][0], band["hours"][1] + 1))
        first = int(rng.integers(0, spec.duration_hours - h + 1))
        contiguous = h <= 3
        if contiguous:
            hours = [base_hour + first + k for k in range(h)]
        else:
            hours = sorted(rng.choice(spec.duration_hours, size=h, replace=False) + base_hour)
    ts = np.sort(_spread_hours(rng, n, list(hours)))
    if "total" in band:
        total = rng.uniform(*band["total"])
        sizes = rng.dirichlet(np.ones(n)) * total
    else:
        sizes = rng.uniform(*band["per_fill"], size=n)
    if whale:
        sizes = sizes * (1_200_000.0 / sizes.sum())
    bias = spec.buy_bias if rng.uniform() < 0.5 else 1.0 - spec.buy_bias
    mk_slot = [chosen[k % n_mk] for k in range(n)]
    rng.shuffle(mk_slot)
    for k in range(n):
        m = mk_slot[k]
        side = BUY if rng.uniform() < bias else SELL
        price = float(np.clip(market_price[m] + rng.normal(0, 0.01), 0.02, 0.98))
        b.trade(addr, side, m, int(ts[k]), price, float(sizes[k]), as_taker=bool(rng.uniform() < 0.5))
    return addr


def simulate_hawkes(mu: float, alpha: float, beta: float, horizon: float | None = None,
                    n_events: int | None = None, seed: int = 0) -> np.ndarray:
    """Exponential-kernel Hawkes event times by Ogata thinning.

    Stops at ``horizon`` or after ``n_events``, whichever is given (both allowed).
    """
    if horizon is None and n_events is None:
        raise ValueError("give a horizon or an event count")
    rng = np.random.default_rng(seed)
    t = 0.0
    excite = 0.0            # sum of alpha * exp(-beta (t - t_i)) at time t
    out = []
    while True:
        bound = mu + excite
        w = rng.exponential(1.0 / bound)
        excite *= math.exp(-beta * w)
        t += w
        if horizon is not None and t > horizon:
            break
        if rng.uniform() * bound <= mu + excite:
            out.append(t)
            excite += alpha
            if n_events is not None and len(out) >= n_events:
                break
    return np.asarray(out)


def impact_series(slope: float, n_bins: int = 40, noise_sd: float = 0.0, seed: int = 0,
                  bin_width: float = 300.0, q_range=(100.0, 1000.0), p0: float = 0.5,
                  market: str = "impact") -> MarketSeries:
    """One fill per bin with price change slope*q + noise; signs steer the price back toward p0."""
    rng = np.random.default_rng(seed)
    p = p0
    ts, price, vol, sign = [], [], [], []
    for k in range(n_bins):
        size = rng.uniform(*q_range)
        up = rng.uniform() < (0.8 if p < p0 else 0.2)
        q = size if up else -size
        p = p + slope * q + (rng.normal(0.0, noise_sd) if noise_sd > 0 else 0.0)
        if not 0 <= p <= 1:
            raise ValueError("impact path left [0, 1]; lower the slope or the bin count")
        ts.append(k * bin_width + bin_width / 2)
        price.append(p)
        vol.append(size)
        sign.append(1.0 if up else -1.0)
    return MarketSeries(market, ts, price, vol, sign, p_open=p0)


def gaussian_blobs(centers, n_per: int, sigma: float = 1.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    pts = np.concatenate([c + rng.normal(0.0, sigma, size=(n_per, centers.shape[1])) for c in centers])
    labels = np.repeat(np.arange(len(centers)), n_per)
    return pts, labels


def generate(spec: SynthSpec = SynthSpec()) -> SynthCorpus:
    spec.validate()
    b = _Builder(spec.seed)
    truth = GroundTruth()
    meta: dict[str, dict] = {}
    t_end = spec.start + spec.duration_hours * HOUR

    mrng = _rng(spec.seed, "markets")
    markets = [market_id(spec.seed, "tier", i) for i in range(spec.n_markets)]
    price = {}
    for m in markets:
        price[m] = float(mrng.uniform(0.1, 0.9))
        p_res = 1.0 if mrng.uniform() < price[m] else 0.0
        meta[m] = {"p_open": price[m], "p_res": p_res, "t_res": float(t_end + HOUR), "group": None}

    # tier population
    for tier, count in spec.tiers.items():
        for i in range(count):
            whale = tier == POWER and i < spec.whales
            a = _plant_tier(b, spec, tier, i, markets, price, whale)
            truth.tiers[a] = tier
            if whale:
                truth.whales.append(a)

    # wash ring: adjacent members round-trip equal notionals within seconds
    wrng = _rng(spec.seed, "wash")
    ring = [address(spec.seed, "wash", i) for i in range(spec.wash_ring)]
    truth.wash = list(ring)
    for i, a in enumerate(ring):
        other = ring[(i + 1) % len(ring)]
        m = markets[int(wrng.integers(len(markets)))]
        for k in range(spec.wash_round_trips):
            t0 = spec.start + int(wrng.integers(0, spec.duration_hours * HOUR - 60))
            dt = int(wrng.integers(1, 30))
            p = price[m]
            b.trade(a, BUY, m, t0, p, spec.wash_notional, counterparty=other)
            b.trade(a, SELL, m, t0 + dt, p, spec.wash_notional, counterparty=other)

    # one-directional addresses with substantial gross volume
    for i in range(spec.directional):
        drng = _rng(spec.seed, "directional", i)
        a = address(spec.seed, "directional", i)
        truth.directional.append(a)
        side = BUY if i % 2 == 0 else SELL
        for k in range(20):
            m = markets[int(drng.integers(len(markets)))]
            t0 = spec.start + int(drng.integers(0, spec.duration_hours * HOUR))
            b.trade(a, side, m, t0, price[m], float(drng.uniform(100, 400)))

    # negRisk groups on dedicated markets, with square deviation pulses
    nrng = _rng(spec.seed, "negrisk")
    groups: list[list[str]] = []
    for g in range(spec.negrisk_groups):
        gid = f"group-{g}"
        members = [market_id(spec.seed, f"negrisk{g}", j) for j in range(spec.negrisk_members)]
        groups.append(members)
        base = nrng.dirichlet(np.ones(spec.negrisk_members) * 4)
        base_e6 = [_e6(x) for x in base]
        base_e6[-1] = USDC_SCALE - sum(base_e6[:-1])
        base_p = [x / USDC_SCALE for x in base_e6]
        pulses = []
        span = spec.duration_hours * HOUR
        slot = span // (spec.negrisk_pulses + 1)
        for k in range(spec.negrisk_pulses):
            start = spec.start + slot * (k + 1) - 600
            width = int(nrng.integers(60, 600))
            bump = float(nrng.choice([-1, 1]) * nrng.uniform(0.04, 0.08))
            pulses.append({"start": start, "duration": width, "member": k % len(members), "bump": bump})
        truth.negrisk[gid] = pulses

        def price_at(j, t, base_p=base_p, pulses=pulses):
            p = base_p[j]
            for pl in pulses:
                if pl["member"] == j and pl["start"] <= t < pl["start"] + pl["duration"]:
                    p += pl["bump"]
            return p

        for j, m in enumerate(members):
            meta[m] = {"p_open": base_p[j], "p_res": None, "t_res": None, "group": gid}
            times = {spec.start + j}
            for pl in pulses:
                if pl["member"] == j:
                    times.update({pl["start"], pl["start"] + pl["duration"]})
            for t in sorted(times):
                f1, f2 = b.fresh_filler(), b.fresh_filler()
                b.trade(f1, BUY, m, t, price_at(j, t), 50.0, counterparty=f2)
        # arbitrage bots: opposite legs on two members a few seconds apart
        for bot in range(spec.arb_bots):
            arng = _rng(spec.seed, "arb", g, bot)
            a = address(spec.seed, f"arb{g}", bot)
            gap = span // (spec.arb_events_per_bot + 1)
            for k in range(spec.arb_events_per_bot):
                ja, jb = arng.choice(len(members), size=2, replace=False)
                t0 = spec.start + gap * (k + 1) + int(arng.integers(0, 300))
                # keep bot legs away from pulse edges so group prices stay on schedule
                t1 = t0 + int(arng.integers(1, 20))
                b.trade(a, BUY, members[ja], t0, price_at(ja, t0), 200.0,
                        counterparty=b.fresh_filler())
                b.trade(a, SELL, members[jb], t1, price_at(jb, t1), 150.0,
                        counterparty=b.fresh_filler())
                truth.arb_pairs.append([a, members[ja], members[jb], t0, t1])

    # self-exciting markets, traded between fresh fillers
    for h in range(spec.hawkes_markets):
        m = market_id(spec.seed, "hawkes", h)
        hrng = _rng(spec.seed, "hawkes", h)
        times = simulate_hawkes(spec.hawkes_mu, spec.hawkes_eta * spec.hawkes_beta, spec.hawkes_beta,
                                horizon=spec.hawkes_horizon, seed=int(hrng.integers(2 ** 31)))
        p = float(hrng.uniform(0.2, 0.8))
        meta[m] = {"p_open": p, "p_res": 1.0, "t_res": float(t_end + HOUR), "group": None}
        truth.hawkes[m] = spec.hawkes_eta
        for t in times:
            side = BUY if hrng.uniform() < 0.5 else SELL
            b.trade(b.fresh_filler(), side, m, spec.start + int(t), p, float(hrng.uniform(10, 100)),
                    counterparty=b.fresh_filler())

    # linear-impact markets: one fill per 5-minute bin
    for k in range(spec.impact_markets):
        m = market_id(spec.seed, "impact", k)
        s = impact_series(spec.impact_slope, spec.impact_bins, spec.impact_noise,
                          seed=int(_rng(spec.seed, "impact", k).integers(2 ** 31)), market=m)
        meta[m] = {"p_open": 0.5, "p_res": 0.0, "t_res": float(t_end + HOUR), "group": None}
        truth.impact_slopes[m] = spec.impact_slope
        for t, p, v, sg in zip(s.ts, s.price, s.volume, s.sign):
            b.trade(b.fresh_filler(), BUY if sg > 0 else SELL, m, spec.start + int(t), float(p), float(v),
                    counterparty=b.fresh_filler())

    # market-level book snapshots with planted mid steps of 0.12
    for k in range(min(spec.swing_markets, len(markets))):
        m = markets[k]
        srng = _rng(spec.seed, "swing", k)
        mid = 0.4
        snaps = []
        t = spec.start
        steps = set(int(x) for x in srng.choice(np.arange(5, 95), size=spec.swings_per_market, replace=False))
        for j in range(100):
            if j in steps:
                mid = mid + 0.12 if mid < 0.5 else mid - 0.12
            snaps.append([float(t), round(mid - 0.01, 6), round(mid + 0.01, 6)])
            t += 60
        meta[m]["book"] = snaps
        truth.swings[m] = spec.swings_per_market

    return SynthCorpus(b.records(), truth, meta)


def write_synth(corpus: SynthCorpus, out_dir: str | Path, spec: SynthSpec) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_corpus(corpus.records, out / "fills.tsv", capabilities=ONCHAIN_CLOB.to_dict(),
                            input_descriptor=f"synth:seed={spec.seed}", parameters=asdict(spec))
    (out / "markets.json").write_text(json.dumps(corpus.markets, indent=1, sort_keys=True))
    (out / "truth.json").write_text(corpus.truth.to_json())
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True))
    return {"records": manifest.record_count, "content_hash": manifest.content_hash}


def small_spec(seed: int = 3) -> SynthSpec:
    """A ~10k-fill corpus for smoke runs."""
    return SynthSpec(seed=seed, tiers={HFO: 10, POWER: 30, HBO: 10, EPISODIC_RETAIL: 150, ACTIVE_RETAIL: 40},
                     whales=1, hawkes_horizon=5_000.0)
