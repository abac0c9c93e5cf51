from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from fillscope import micropanel as mp
from fillscope.micropanel import (
    BookSnapshot, MarketSeries, WinsorSpec, book_diagnostics, fit_hawkes, hawkes_loglik, ils, kyle_lambda,
    order_flow_imbalance, order_imbalance, persistence_ratio, trade_size_kurtosis, two_sidedness, vpin,
    winsorize,
)
from fillscope.synth import impact_series, simulate_hawkes


def random_series(seed, n=None, market="m", span=40_000.0, resolved=True) -> MarketSeries:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 400)) if n is None else n
    ts = np.sort(np.round(rng.uniform(0, span, n)))
    price = np.clip(np.round(0.5 + np.cumsum(rng.normal(0, 0.02, n)), 3), 0.0, 1.0)
    vol = np.round(rng.lognormal(3, 1.2, n), 2)
    sign = np.where(rng.uniform(size=n) < rng.uniform(0.2, 0.8), 1.0, -1.0)
    kw = {}
    if resolved:
        kw = dict(p_open=float(rng.uniform(0.05, 0.95)), p_res=float(rng.integers(0, 2)),
                  t_res=float(ts[-1] + rng.uniform(0, 50_000)))
    return MarketSeries(market, ts, price, vol, sign, **kw)


def windows(s, width):
    groups = OrderedDict()
    for t, v, g in zip(s.ts, s.volume, s.sign):
        k = math.floor((t - s.ts[0]) / width)
        vb, vs = groups.get(k, (0.0, 0.0))
        groups[k] = (vb + v, vs) if g > 0 else (vb, vs + v)
    return list(groups.values())


def brute_oi(s, width):
    w = windows(s, width)
    total = sum(b + x for b, x in w)
    if total <= 0:
        return None
    net = sum(b - x for b, x in w)
    return math.copysign(1.0, net) * sum(abs(b - x) for b, x in w) / total if net else 0.0


def brute_ts(s, width):
    w = windows(s, width)
    total = sum(b + x for b, x in w)
    return 1 - sum(abs(b - x) for b, x in w) / total if total > 0 else None


def brute_pr(s, width):
    lp = [math.log(min(max(p, 1e-4), 1 - 1e-4) / (1 - min(max(p, 1e-4), 1 - 1e-4))) for p in s.price]
    per = {}
    gross = 0.0
    for i in range(1, s.n):
        a = math.floor((s.ts[i - 1] - s.ts[0]) / width)
        b = math.floor((s.ts[i] - s.ts[0]) / width)
        if a == b:
            r = lp[i] - lp[i - 1]
            per[b] = per.get(b, 0.0) + r
            gross += abs(r)
    return None if gross <= 0 else sum(abs(v) for v in per.values()) / gross


def brute_vpin(s, n_buckets):
    """Walk the fills, filling equal-volume buckets one unit of split volume at a time."""
    total = float(s.volume.sum())
    size = total / n_buckets
    buckets, cur_b, cur_v = [], 0.0, 0.0
    for v, g in zip(s.volume, s.sign):
        left = float(v)
        while left > 0:
            take = min(left, size - cur_v)
            cur_v += take
            if g > 0:
                cur_b += take
            left -= take
            if cur_v >= size * (1 - 1e-12):
                buckets.append((cur_b, cur_v))
                cur_b = cur_v = 0.0
    if cur_v >= 0.5 * size * (1 - 1e-12) and cur_v > 1e-12 * total:
        buckets.append((cur_b, cur_v))
    return sum(abs(2 * b - v) / v for b, v in buckets) / len(buckets)


@pytest.mark.parametrize("seed", range(25))
def test_windowed_metrics_match_brute_force(seed):
    s = random_series(seed)
    for name, width in mp.OI_WINDOWS.items():
        assert order_imbalance(s, width) == pytest.approx(brute_oi(s, width), abs=1e-12)
    for width in (3600.0, 14400.0):
        assert two_sidedness(s, width) == pytest.approx(brute_ts(s, width), abs=1e-12)
        got, ref = persistence_ratio(s, width), brute_pr(s, width)
        assert (got is None and ref is None) or got == pytest.approx(ref, abs=1e-12)
    assert order_flow_imbalance(s) == (np.sum(s.sign > 0) - np.sum(s.sign < 0)) / s.n
    assert vpin(s, 50) == pytest.approx(brute_vpin(s, 50), abs=1e-9)


def test_vpin_fixture():
    # two buckets of 10: all-buy then all-sell -> imbalance 1 in both
    s = MarketSeries("m", [0, 1, 2], [0.5] * 3, [10, 5, 5], [1, -1, -1])
    assert vpin(s, 2) == pytest.approx(1.0)
    # a straddling fill is split pro rata: buckets (6 buy, 4 sell) and (0 buy, 10 sell)
    s = MarketSeries("m", [0, 1], [0.5] * 2, [6, 14], [1, -1])
    assert vpin(s, 2) == pytest.approx((0.2 + 1.0) / 2)


def test_oi_is_zero_for_balanced_flow():
    s = MarketSeries("m", [0, 10, 400, 410], [0.5] * 4, [5, 5, 5, 5], [1, 1, -1, -1])
    assert order_imbalance(s, 300) == 0.0
    assert order_imbalance(s, 3600) == 0.0
    assert two_sidedness(s) == 1.0
    assert two_sidedness(s, 300) == 0.0


def test_persistence_ratio_extremes():
    up = MarketSeries("m", np.arange(10.0), np.linspace(0.2, 0.8, 10), np.ones(10), np.ones(10))
    assert persistence_ratio(up, 3600) == pytest.approx(1.0)
    zig = MarketSeries("m", np.arange(10.0), [0.4, 0.6] * 5, np.ones(10), np.ones(10))
    assert persistence_ratio(zig, 3600) == pytest.approx(1 / 9)


def brute_kyle(s, width=300.0):
    closes, flows = OrderedDict(), OrderedDict()
    for t, p, v, g in zip(s.ts, s.price, s.volume, s.sign):
        k = math.floor((t - s.ts[0]) / width)
        closes[k] = p
        flows[k] = flows.get(k, 0.0) + g * v
    prev = s.p_open
    dp = []
    for k in closes:
        dp.append(closes[k] - prev)
        prev = closes[k]
    return np.polyfit(list(flows.values()), dp, 1)[0]


@pytest.mark.parametrize("seed", range(10))
def test_kyle_matches_polyfit(seed):
    s = random_series(seed, n=300)
    assert kyle_lambda(s).slope == pytest.approx(brute_kyle(s), rel=1e-9, abs=1e-15)


def test_kyle_recovers_noise_free_slope():
    s = impact_series(2e-5, 40, 0.0, seed=1)
    assert kyle_lambda(s).slope == pytest.approx(2e-5, rel=1e-9)


def test_kyle_underdetermined():
    s = MarketSeries("m", [0, 1, 2], [0.5, 0.6, 0.7], [1, 1, 1], [1, 1, 1])
    with pytest.raises(mp.Underdetermined):
        kyle_lambda(s)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=80))
def test_winsorize_matches_sort_and_is_idempotent(values):
    spec = WinsorSpec().fit(values)
    v = np.asarray(values)
    s = np.sort(v)
    n = len(s)
    # linear-interpolation quantile written out from the sorted sample
    def q(p):
        h = (n - 1) * p
        lo = math.floor(h)
        return s[lo] + (h - lo) * (s[min(lo + 1, n - 1)] - s[lo])
    assert spec.lo == pytest.approx(q(0.01), rel=1e-12, abs=1e-9)
    assert spec.hi == pytest.approx(q(0.99), rel=1e-12, abs=1e-9)
    out, count = winsorize(v, spec)
    assert count == sum(1 for x in v if x < spec.lo or x > spec.hi)
    assert np.array_equal(out, [min(max(x, spec.lo), spec.hi) for x in v])
    again, c2 = winsorize(out, spec)
    assert np.array_equal(again, out) and c2 == 0


def test_kurtosis_fixtures():
    s = MarketSeries("m", [0, 1, 2, 3], [0.5] * 4, [2.0, 2.0, 7.0, 7.0], [1] * 4)
    assert trade_size_kurtosis(s) == pytest.approx(-2.0)
    flat = MarketSeries("m", [0, 1], [0.5] * 2, [3.0, 3.0], [1, 1])
    assert trade_size_kurtosis(flat) is None
    r = random_series(4, n=200)
    assert trade_size_kurtosis(r) == pytest.approx(stats.kurtosis(r.volume, fisher=True, bias=True))


def test_ils_fixture():
    s = MarketSeries("m", [0, 100, 200], [0.3, 0.5, 0.9], [1, 1, 1], [1, 1, 1],
                     p_open=0.2, p_res=1.0, t_res=300)
    vals, scope = ils(s, [250, 150, 50, 1000])
    assert scope
    # last prices before t_res - a: 0.3, 0.5, 0.9, none
    assert vals[:3] == pytest.approx([0.125, 0.375, 0.875])
    assert vals[3] is None
    flat = MarketSeries("m", [0], [0.5], [1], [1], p_open=0.5, p_res=0.52, t_res=10)
    assert ils(flat, mp.DEFAULT_ANCHORS) == ([None] * 4, False)
    with pytest.raises(mp.NoResolution):
        ils(MarketSeries("m", [0], [0.5], [1], [1]), mp.DEFAULT_ANCHORS)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ils_mirror_symmetry(seed):
    s = random_series(seed)
    m = MarketSeries("m", s.ts, 1 - s.price, s.volume, -s.sign, p_open=1 - s.p_open,
                     p_res=1 - s.p_res, t_res=s.t_res)
    a, sa = ils(s)
    b, sb = ils(m)
    assert sa == sb
    for x, y in zip(a, b):
        assert (x is None and y is None) or x == pytest.approx(y, abs=1e-12)


def brute_loglik(t, T, mu, alpha, beta):
    ll = 0.0
    for i, ti in enumerate(t):
        ll += math.log(mu + sum(alpha * math.exp(-beta * (ti - tj)) for tj in t[:i]))
    return ll - mu * T - alpha / beta * sum(1 - math.exp(-beta * (T - tj)) for tj in t)


def test_hawkes_loglik_and_gradient():
    t = np.sort(np.random.default_rng(0).uniform(0, 50, 60))
    theta = (0.7, 0.9, 1.6)
    ll, g = hawkes_loglik(t, 55.0, *theta, grad=True)
    assert ll == pytest.approx(brute_loglik(list(t), 55.0, *theta), rel=1e-12)
    for k in range(3):
        h = 1e-6
        up, dn = list(theta), list(theta)
        up[k] += h
        dn[k] -= h
        fd = (hawkes_loglik(t, 55.0, *up) - hawkes_loglik(t, 55.0, *dn)) / (2 * h)
        assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_hawkes_fit_recovers_branching():
    t = simulate_hawkes(0.5, 0.5 * 1.5, 1.5, n_events=3000, seed=4)
    fit = fit_hawkes(t)
    assert abs(fit.eta - 0.5) < 0.08
    assert len(fit.starts) == 9
    assert fit.loglik >= max(ll for _, ll in fit.starts) - 1e-6


def test_hawkes_poisson_gives_small_eta():
    t = np.sort(np.random.default_rng(1).uniform(0, 3000, 3000))
    assert fit_hawkes(t).eta < 0.1
    with pytest.raises(mp.Underdetermined):
        fit_hawkes(t[:10])


def brute_swings(ts, mid, thr, window):
    out, start = [], 0
    for i in range(len(ts)):
        elig = [j for j in range(start, i) if ts[i] - ts[j] <= window]
        hit = None
        if elig:
            lo = min(elig, key=lambda j: (mid[j], -j))
            hi = max(elig, key=lambda j: (mid[j], j))
            if mid[i] - mid[lo] > thr:
                hit = lo
            elif mid[hi] - mid[i] > thr:
                hit = hi
        if hit is not None:
            out.append((ts[hit], ts[i]))
            start = i
    return out


@pytest.mark.parametrize("seed", range(15))
def test_swings_match_sliding_window_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 300
    ts = np.cumsum(rng.integers(10, 120, n)).astype(float)
    mid = np.clip(0.5 + np.cumsum(rng.choice([-1, 0, 1], n) * rng.choice([0.01, 0.04, 0.08], n)), 0.05, 0.95)
    book = [BookSnapshot(t, m - 0.01, m + 0.01) for t, m in zip(ts, mid)]
    s = MarketSeries("m", [], [], [], [], book=book)
    got = [(e["t_from"], e["t_to"]) for e in book_diagnostics(s, 0.10, 300).swings]
    ref = brute_swings(ts, (np.array([b.best_bid for b in book]) + [b.best_ask for b in book]) / 2, 0.10, 300)
    assert got == ref


def test_single_step_is_one_swing():
    ts = np.arange(0, 3600, 60.0)
    mid = np.where(ts < 1800, 0.3, 0.5)
    s = MarketSeries("m", [], [], [], [], book=[BookSnapshot(t, m - 0.01, m + 0.01) for t, m in zip(ts, mid)])
    d = book_diagnostics(s)
    assert len(d.swings) == 1 and d.swings[0]["move"] == pytest.approx(0.2)
    assert np.allclose(d.spread, 0.02)


def test_panel_sci_and_round_trip(tmp_path):
    series = [random_series(i, market=f"m{i:02d}", resolved=i % 2 == 0) for i in range(30)]
    panel = mp.compute_panel(series, hawkes=False)
    rows = panel.rows
    assert [r.market for r in rows] == sorted(r.market for r in rows)
    assert panel.metadata["sci_canonical"] is False
    # SCI equals the weighted z-score sum recomputed by hand
    for window, comps in mp.SCI_COMPONENTS.items():
        cols = []
        for c in comps:
            vals = [getattr(r, c) for r in rows]
            v = np.array([x for x in vals if x is not None])
            cols.append([None if x is None else (x - v.mean()) / v.std() for x in vals])
        for scheme, w in mp.SCI_SCHEMES.items():
            for i, r in enumerate(rows):
                pairs = [(col[i], wi) for col, wi in zip(cols, w) if col[i] is not None]
                ref = sum(z * wi for z, wi in pairs) / sum(wi for _, wi in pairs)
                assert getattr(r, f"sci_{scheme}_{window}") == pytest.approx(ref, abs=1e-12)
    raw = [r.kyle_lambda_raw for r in rows if r.kyle_lambda_raw is not None]
    lo, hi = np.quantile(raw, [0.01, 0.99])
    for r in rows:
        if r.kyle_lambda_raw is not None:
            assert r.kyle_lambda_winsorized == min(max(r.kyle_lambda_raw, lo), hi)
    p = tmp_path / "metrics.tsv"
    mp.write_metrics(rows, p)
    assert mp.read_metrics(p) == rows


def test_anchor_names_and_durations():
    assert mp.anchor_names([1, 2, 3, 4]) == ["ils_1h", "ils_6h", "ils_24h", "ils_72h"]
    with pytest.raises(ValueError):
        mp.anchor_names([1, 2])
    assert [mp.parse_duration(x) for x in ("90s", "5m", "1h", "3d", "7")] == [90, 300, 3600, 259200, 7]


def test_series_validation():
    with pytest.raises(ValueError):
        MarketSeries("m", [1, 0], [0.5, 0.5], [1, 1], [1, 1])
    with pytest.raises(ValueError):
        MarketSeries("m", [0], [1.5], [1], [1])
    with pytest.raises(NotImplementedError):
        mp.post_fill_adverse_selection()


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_bounded_metrics_stay_in_range(seed):
    row = mp.market_row(random_series(seed), hawkes=False)
    for name, (lo, hi) in mp.BOUNDED.items():
        v = getattr(row, name)
        assert v is None or lo <= v <= hi, name
