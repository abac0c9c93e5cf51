from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fillscope import features, gates
from fillscope.features import (
    AddressAggregate, DegenerateFeature, FeatureNotEnabled, aggregate, aggregate_partitioned, apply_scaler,
    compute_features, fit_scaler,
)
from fillscope.gates import (
    FAIL, PARTIAL, PASS, BookGranularity, CorpusCapabilities, evaluate_gates,
)
from fillscope.ingest import BUY

from conftest import make_fill, random_fills


# ---- gates ------------------------------------------------------------------

def test_onchain_clob_gate_outcome():
    rep = evaluate_gates(gates.ONCHAIN_CLOB)
    assert (rep.g_fill, rep.g_quote_life, rep.g_book) == (PASS, FAIL, PARTIAL)
    assert rep.enabled_features == ["f2", "f3", "f5", "f6", "f7", "f9"]
    w = rep.withdrawn_ids()
    assert set(gates.QUOTE_LIFE_ANALYSES) <= w
    assert "address_level_book_attribution" in w
    assert not (set(gates.FILL_ANALYSES) & w)


def _all_caps():
    for fill, quote in itertools.product([False, True], repeat=2):
        yield CorpusCapabilities(fill, quote, False, BookGranularity.NONE)
        for g in (BookGranularity.MARKET_LEVEL, BookGranularity.ADDRESS_LEVEL):
            yield CorpusCapabilities(fill, quote, True, g)


@pytest.mark.parametrize("caps", list(_all_caps()), ids=str)
def test_gate_invariants_over_every_capability_set(caps):
    rep = evaluate_gates(caps)
    w = rep.withdrawn_ids()
    assert (rep.g_fill == PASS) == caps.has_fill_attribution
    assert (set(gates.FILL_FEATURES) <= set(rep.enabled_features)) == caps.has_fill_attribution
    assert (set(gates.QUOTE_FEATURES) <= set(rep.enabled_features)) == caps.has_quote_lifecycle
    assert ("spoof_non_fill" in w) != caps.has_quote_lifecycle
    assert ("book_swings" in w) == (not caps.has_book_snapshots)
    assert rep.g_book == {BookGranularity.NONE: FAIL, BookGranularity.MARKET_LEVEL: PARTIAL,
                          BookGranularity.ADDRESS_LEVEL: PASS}[caps.book_granularity]
    assert gates.GateReport.from_dict(__import__("json").loads(rep.to_json())) == rep


def test_capability_consistency_checks():
    with pytest.raises(ValueError):
        CorpusCapabilities(True, False, True, "NONE")
    with pytest.raises(ValueError):
        CorpusCapabilities(True, False, False, "MARKET_LEVEL")


def test_features_refuse_withdrawn_gate():
    rep = evaluate_gates(CorpusCapabilities(False, False, False))
    agg = aggregate([make_fill(0, 1, 2)])[make_fill(0, 1, 2).maker]
    with pytest.raises(FeatureNotEnabled):
        compute_features(agg, rep)


def test_address_resolution_fraction():
    recs = [make_fill(0, 1, 2, notional=30), make_fill(1, 3, 4, notional=70)]
    out = gates.address_resolution_fraction(recs, [recs[0].maker])
    assert out["routed_fraction"] == pytest.approx(0.3)
    assert out["downgrade"] is True


# ---- aggregation ------------------------------------------------------------

def oracle_aggregate(records):
    """Sequential loop written out field by field, independent of AddressAggregate.add."""
    rows = {}
    for r in records:
        for a, is_buy in ((r.taker, r.side == BUY), (r.maker, r.side != BUY)):
            d = rows.setdefault(a, {"n": 0, "b": 0, "s": 0, "mc": Counter(), "mn": Counter(),
                                    "h": [0] * 24, "ids": set(), "ts": []})
            d["n"] += 1
            d["b" if is_buy else "s"] += r.notional_e6
            d["mc"][r.market_token] += 1
            d["mn"][r.market_token] += r.notional_e6
            d["h"][(r.timestamp // 3600) % 24] += 1
            d["ids"].add(r.timestamp // 3600)
            d["ts"].append(r.timestamp)
    return {a: (a, d["n"], d["b"], d["s"], tuple(sorted(d["mc"].items())), tuple(sorted(d["mn"].items())),
                tuple(d["h"]), tuple(sorted(d["ids"])), min(d["ts"]), max(d["ts"]))
            for a, d in rows.items()}


def test_aggregate_matches_sequential_oracle():
    recs = random_fills(np.random.default_rng(11), 2000)
    got = {a: g.state() for a, g in aggregate(recs).items()}
    assert got == oracle_aggregate(recs)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 400), buckets=st.integers(1, 16))
def test_partition_merge_is_bit_exact(seed, n, buckets):
    recs = random_fills(np.random.default_rng(seed), n, n_addr=25)
    a = {k: v.state() for k, v in aggregate(recs).items()}
    b = {k: v.state() for k, v in aggregate_partitioned(recs, buckets).items()}
    assert a == b


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_merge_is_commutative_and_associative(seed):
    rng = np.random.default_rng(seed)
    recs = [r for r in random_fills(rng, 90, n_addr=3)]
    who = recs[0].maker
    parts = [aggregate(recs[i::3]).get(who, AddressAggregate(who)) for i in range(3)]
    x, y, z = parts
    assert x.merge(y).state() == y.merge(x).state()
    assert x.merge(y).merge(z).state() == x.merge(y.merge(z)).state()
    assert x.merge(AddressAggregate(who)).state() == x.state()


def test_activity_filter():
    recs = [make_fill(i, 1, 100 + i) for i in range(5)]
    aggs = aggregate(recs)
    kept = features.activity_filter(aggs, 5)
    assert list(kept) == [recs[0].maker]
    with pytest.raises(ValueError):
        features.activity_filter(aggs, 0)


# ---- features ---------------------------------------------------------------

def _agg_with(notionals, hours=None, markets=None, sides=None):
    g = AddressAggregate("0xabc")
    for i, v in enumerate(notionals):
        h = hours[i] if hours else 0
        m = markets[i] if markets else "m"
        g.add(m, True if sides is None else sides[i], int(round(v * 1e6)), 1_700_006_400 + 3600 * h)
    return g


def test_f3_log10_of_mean_notional():
    assert compute_features(_agg_with([94.0] * 3)).f3 == pytest.approx(math.log10(94.0), abs=1e-12)
    assert round(compute_features(_agg_with([4.77])).f3, 3) == 0.679
    fv = compute_features(_agg_with([0.0, 0.0]))
    assert fv.degenerate_notional and fv.f3 == 0.0


def test_feature_formulas_against_hand_values():
    # 4 fills, 2 markets (3/1), hours {0,0,1,5}, buys 30 and sells 10
    g = _agg_with([10, 10, 10, 10], hours=[0, 0, 1, 5], markets=["a", "a", "a", "b"],
                  sides=[True, True, True, False])
    fv = compute_features(g)
    assert fv.f2 == pytest.approx(math.log1p(4 / 3))
    assert fv.f5 == pytest.approx(0.5)
    assert fv.f6 == pytest.approx(0.75 ** 2 + 0.25 ** 2)
    assert fv.f7 == pytest.approx(-(0.5 * math.log(0.5) + 2 * 0.25 * math.log(0.25)))
    assert fv.f9 == pytest.approx(math.log(3))
    nf = compute_features(g, hhi_weight="notional")
    assert nf.f6 == pytest.approx(0.75 ** 2 + 0.25 ** 2)


def test_f7_maximum_is_ln24():
    fv = compute_features(_agg_with([1.0] * 24, hours=list(range(24))))
    assert fv.f7 == pytest.approx(math.log(24), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_feature_ranges(seed):
    recs = random_fills(np.random.default_rng(seed), 200, n_addr=10)
    for g in aggregate(recs).values():
        fv = compute_features(g)
        assert -1 <= fv.f5 <= 1
        assert 1 / g.n_markets - 1e-12 <= fv.f6 <= 1 + 1e-12
        assert 0 <= fv.f7 <= math.log(24) + 1e-12
        assert fv.f2 > 0 and fv.f9 >= math.log(2)


def test_scaler_winsor_z_and_robust():
    rng = np.random.default_rng(0)
    raw = rng.lognormal(size=(500, 3))
    st_ = fit_scaler(raw)
    z = apply_scaler(st_, raw)
    assert np.allclose(z.mean(0), 0, atol=1e-12) and np.allclose(z.std(0), 1)
    assert np.all(raw.max(0) > np.array(st_.caps))
    rb = fit_scaler(raw, "robust")
    zr = apply_scaler(rb, raw)
    assert np.allclose(np.median(zr, 0), 0, atol=1e-12)
    again = features.ScalerState.from_dict(__import__("json").loads(st_.to_json()))
    assert np.array_equal(apply_scaler(again, raw), z)


def test_scaler_rejects_degenerate_columns():
    raw = np.column_stack([np.arange(10.0), np.ones(10)])
    with pytest.raises(DegenerateFeature):
        fit_scaler(raw)
    with pytest.raises(DegenerateFeature):
        fit_scaler(raw[:1])
