"""Per-market microstructure metric panel.

Per-market metrics are pure functions of a :class:`MarketSeries`. Two metrics
need a cross-market pass (the Kyle lambda winsorization band and the SCI
z-scores), so :func:`compute_panel` runs in two phases: an independent
per-market pass, then the cross-market fit and re-application.
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .ingest import BUY, FillRecord

LOGIT_DELTA = 1e-4
ILS_SCOPE = 0.05
DEFAULT_ANCHORS = (3600.0, 6 * 3600.0, 24 * 3600.0, 72 * 3600.0)
OI_WINDOWS = {"oi_5m": 300.0, "oi_15m": 900.0, "oi_1h": 3600.0, "oi_4h": 14400.0}
KYLE_BIN = 300.0
HAWKES_MIN_EVENTS = 50
SWING_THRESHOLD = 0.10
SWING_WINDOW = 300.0

SCI_SCHEMES = {
    "uniform": (0.25, 0.25, 0.25, 0.25),
    "toxicity": (0.2, 0.2, 0.2, 0.4),
    "persistence": (0.4, 0.2, 0.2, 0.2),
}
# component order for every scheme: PR, TS, OI, VPIN
SCI_COMPONENTS = {
    "60m": ("pr_60m", "ts_60m", "oi_1h", "vpin_50"),
    "240m": ("pr_240m", "ts_240m", "oi_4h", "vpin_50"),
}

METRIC_NAMES = (
    "ils_1h", "ils_6h", "ils_24h", "ils_72h",
    "ofi", "oi_5m", "oi_15m", "oi_1h",
    "ts_60m", "ts_full", "pr_60m", "pr_240m",
    "vpin_50", "kyle_lambda_winsorized",
    "sci_uniform_60m", "sci_uniform_240m",
    "sci_toxicity_60m", "sci_toxicity_240m",
    "sci_persistence_60m", "sci_persistence_240m",
    "trade_size_kurtosis", "hawkes_branching",
)

BOUNDED = {
    "ofi": (-1.0, 1.0), "oi_5m": (-1.0, 1.0), "oi_15m": (-1.0, 1.0), "oi_1h": (-1.0, 1.0),
    "oi_4h": (-1.0, 1.0), "ts_60m": (0.0, 1.0), "ts_240m": (0.0, 1.0), "ts_full": (0.0, 1.0),
    "pr_60m": (0.0, 1.0), "pr_240m": (0.0, 1.0), "vpin_50": (0.0, 1.0),
    "ils_1h": (0.0, 1.0), "ils_6h": (0.0, 1.0), "ils_24h": (0.0, 1.0), "ils_72h": (0.0, 1.0),
    "hawkes_branching": (0.0, 1.0),
}


class Underdetermined(ValueError):
    pass


class NoResolution(ValueError):
    pass


class NoPriceAtAnchor(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


@dataclass
class BookSnapshot:
    timestamp: float
    best_bid: float
    best_ask: float


@dataclass
class MarketSeries:
    """Time-ordered fills of one outcome token plus optional book and resolution data.

    ``volume`` is fill notional in USDC; ``sign`` is +1 for taker buys and -1
    for taker sells.
    """

    market: str
    ts: np.ndarray
    price: np.ndarray
    volume: np.ndarray
    sign: np.ndarray
    p_open: float | None = None
    p_res: float | None = None
    t_res: float | None = None
    book: list[BookSnapshot] = field(default_factory=list)

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=float)
        self.price = np.asarray(self.price, dtype=float)
        self.volume = np.asarray(self.volume, dtype=float)
        self.sign = np.asarray(self.sign, dtype=float)
        n = self.ts.size
        if not (self.price.size == self.volume.size == self.sign.size == n):
            raise ValueError("series arrays must have equal length")
        if n and np.any(np.diff(self.ts) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if n and (self.price.min() < 0 or self.price.max() > 1):
            raise ValueError("prices must lie in [0, 1]")
        if np.any(self.volume < 0):
            raise ValueError("volumes must be non-negative")
        if self.p_open is None and n:
            self.p_open = float(self.price[0])

    @property
    def n(self) -> int:
        return int(self.ts.size)

    @property
    def buy_volume(self) -> np.ndarray:
        return np.where(self.sign > 0, self.volume, 0.0)

    @property
    def sell_volume(self) -> np.ndarray:
        return np.where(self.sign < 0, self.volume, 0.0)


def series_from_fills(records: Iterable[FillRecord], meta: Mapping[str, dict] | None = None) -> dict[str, MarketSeries]:
    """Group fills by market token. ``meta`` may carry p_open, p_res, t_res and book snapshots."""
    meta = meta or {}
    by_market: dict[str, list[FillRecord]] = defaultdict(list)
    for r in records:
        by_market[r.market_token].append(r)
    out = {}
    for m in sorted(by_market):
        fills = sorted(by_market[m], key=lambda r: (r.timestamp, r.block_number, r.log_index))
        info = meta.get(m, {})
        book = [b if isinstance(b, BookSnapshot) else BookSnapshot(*b) for b in info.get("book", [])]
        out[m] = MarketSeries(
            market=m,
            ts=[r.timestamp for r in fills],
            price=[r.price for r in fills],
            volume=[r.notional for r in fills],
            sign=[1.0 if r.side == BUY else -1.0 for r in fills],
            p_open=info.get("p_open"),
            p_res=info.get("p_res"),
            t_res=info.get("t_res"),
            book=book,
        )
    return out


def _window_index(ts: np.ndarray, width: float) -> np.ndarray:
    """Tumbling-window ids aligned to the first fill."""
    return np.floor((ts - ts[0]) / width).astype(np.int64)


def _windowed_flow(s: MarketSeries, width: float) -> tuple[np.ndarray, np.ndarray]:
    idx = _window_index(s.ts, width)
    _, inv = np.unique(idx, return_inverse=True)
    vb = np.bincount(inv, weights=s.buy_volume)
    vs = np.bincount(inv, weights=s.sell_volume)
    return vb, vs


def order_imbalance(s: MarketSeries, window: float) -> float | None:
    """Volume-weighted mean of per-window |VB - VS| / V, signed by net flow."""
    if s.n == 0:
        return None
    vb, vs = _windowed_flow(s, window)
    total = float(np.sum(vb + vs))
    if total <= 0:
        return None
    magnitude = float(np.sum(np.abs(vb - vs))) / total
    net = float(np.sum(vb) - np.sum(vs))
    return float(np.sign(net)) * min(magnitude, 1.0)


def order_flow_imbalance(s: MarketSeries) -> float | None:
    """Count-based full-lifetime imbalance (N_buy - N_sell) / N."""
    if s.n == 0:
        return None
    return float(np.sum(s.sign)) / s.n


def two_sidedness(s: MarketSeries, window: float | None = None) -> float | None:
    """1 - |VB - VS| / V; with a window, the volume-weighted mean over tumbling windows."""
    if s.n == 0:
        return None
    if window is None:
        vb, vs = np.array([s.buy_volume.sum()]), np.array([s.sell_volume.sum()])
    else:
        vb, vs = _windowed_flow(s, window)
    total = float(np.sum(vb + vs))
    if total <= 0:
        return None
    return max(0.0, 1.0 - float(np.sum(np.abs(vb - vs))) / total)


def logit(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), LOGIT_DELTA, 1.0 - LOGIT_DELTA)
    return np.log(p) - np.log1p(-p)


def persistence_ratio(s: MarketSeries, window: float) -> float | None:
    """sum_w |sum r| / sum_w sum |r| over logit returns within tumbling windows."""
    if s.n < 2:
        return None
    idx = _window_index(s.ts, window)
    r = np.diff(logit(s.price))
    same = idx[1:] == idx[:-1]
    r, w = r[same], idx[1:][same]
    gross = float(np.sum(np.abs(r)))
    if gross <= 0:
        return None
    _, inv = np.unique(w, return_inverse=True)
    net = np.abs(np.bincount(inv, weights=r))
    return min(float(np.sum(net)) / gross, 1.0)


def vpin(s: MarketSeries, n_buckets: int = 50, bucket_volume: float | None = None) -> float | None:
    """Mean |VB - VS| / V over equal-volume buckets using the observed sides.

    Fills straddling a bucket boundary are split pro rata. A trailing partial
    bucket is kept only if it holds at least half a bucket.
    """
    total = float(s.volume.sum())
    if total <= 0:
        return None
    size = bucket_volume if bucket_volume is not None else total / n_buckets
    full = int(math.floor(total / size + 1e-9))
    edges = [size * j for j in range(full + 1)]
    if total - edges[-1] >= 0.5 * size * (1 - 1e-12) and total - edges[-1] > 1e-12 * total:
        edges.append(total)
    if len(edges) < 2:
        return None
    cum_v = np.concatenate([[0.0], np.cumsum(s.volume)])
    cum_b = np.concatenate([[0.0], np.cumsum(s.buy_volume)])
    b_at = np.interp(edges, cum_v, cum_b)
    vb = np.diff(b_at)
    vol = np.diff(np.asarray(edges))
    imb = np.abs(2.0 * vb - vol) / vol
    return float(np.clip(imb.mean(), 0.0, 1.0))


@dataclass
class KyleFit:
    slope: float
    intercept: float
    n_bins: int


def kyle_bins(s: MarketSeries, bin_width: float = KYLE_BIN) -> tuple[np.ndarray, np.ndarray]:
    """(signed volume, price change) per non-empty time bin.

    The change is the bin's closing price minus the previous non-empty bin's
    close; the first bin is measured from the opening price.
    """
    if s.n == 0:
        return np.empty(0), np.empty(0)
    idx = _window_index(s.ts, bin_width)
    keys, inv = np.unique(idx, return_inverse=True)
    q = np.bincount(inv, weights=s.sign * s.volume)
    last = np.zeros(keys.size, dtype=np.int64)
    last[inv] = np.arange(s.n)   # later fills overwrite earlier ones
    close = s.price[last]
    prev = np.concatenate([[s.p_open if s.p_open is not None else s.price[0]], close[:-1]])
    return q, close - prev


def ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx <= 0:
        raise Underdetermined("signed volume has no variation")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    return slope, float(ym - slope * xm)


def kyle_lambda(s: MarketSeries, bin_width: float = KYLE_BIN) -> KyleFit:
    q, dp = kyle_bins(s, bin_width)
    if q.size < 3:
        raise Underdetermined(f"{q.size} bins with trades, need 3")
    slope, icpt = ols(q, dp)
    return KyleFit(slope, icpt, int(q.size))


@dataclass
class WinsorSpec:
    lower_q: float = 0.01
    upper_q: float = 0.99
    lo: float | None = None
    hi: float | None = None
    outlier_count: int = 0

    def fit(self, values) -> "WinsorSpec":
        v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
        if v.size == 0:
            return WinsorSpec(self.lower_q, self.upper_q, None, None, 0)
        lo, hi = np.quantile(v, [self.lower_q, self.upper_q])
        return WinsorSpec(self.lower_q, self.upper_q, float(lo), float(hi), 0)


def winsorize(values, spec: WinsorSpec) -> tuple[np.ndarray, int]:
    """Clip to [lo, hi]; the count is of values strictly outside the band."""
    v = np.asarray(values, dtype=float)
    if spec.lo is None or spec.hi is None:
        return v.copy(), 0
    if spec.lo > spec.hi:
        raise ValueError("winsor band has lo > hi")
    outside = int(np.count_nonzero((v < spec.lo) | (v > spec.hi)))
    return np.clip(v, spec.lo, spec.hi), outside


def ils(s: MarketSeries, anchors: Sequence[float] = DEFAULT_ANCHORS) -> tuple[list[float | None], bool]:
    """Fraction of the open-to-resolution move already realized at each anchor before resolution.

    Returns (values, in_scope). Out-of-scope markets get all-null values.
    """
    if s.p_res is None or s.t_res is None or s.p_open is None:
        raise NoResolution(s.market)
    move = s.p_res - s.p_open
    in_scope = abs(move) > ILS_SCOPE
    if not in_scope:
        return [None] * len(anchors), False
    out: list[float | None] = []
    for a in anchors:
        k = int(np.searchsorted(s.ts, s.t_res - a, side="right"))
        if k == 0:
            out.append(None)
            continue
        out.append(float(np.clip((s.price[k - 1] - s.p_open) / move, 0.0, 1.0)))
    return out, True


def trade_size_kurtosis(s: MarketSeries) -> float | None:
    """Bias-uncorrected excess kurtosis m4 / m2^2 - 3 of fill notionals."""
    if s.n < 2:
        return None
    d = s.volume - s.volume.mean()
    m2 = float(np.mean(d * d))
    if m2 <= 1e-300 or m2 <= (1e-12 * abs(s.volume.mean())) ** 2:
        return None
    return float(np.mean(d ** 4) / (m2 * m2) - 3.0)


# ---- Hawkes -----------------------------------------------------------------

def hawkes_loglik(times: np.ndarray, T: float, mu: float, alpha: float, beta: float,
                  grad: bool = False):
    """Exponential-kernel log-likelihood on [0, T] and optionally its (mu, alpha, beta) gradient."""
    t = np.asarray(times, dtype=float)
    n = t.size
    A = np.zeros(n)
    B = np.zeros(n)
    a_prev = b_prev = 0.0
    dt = np.diff(t)
    decay = np.exp(-beta * dt)
    for i in range(1, n):
        e = decay[i - 1]
        a_prev, b_prev = e * (1.0 + a_prev), e * (dt[i - 1] * (1.0 + a_prev) + b_prev)
        A[i] = a_prev
        B[i] = b_prev
    lam = mu + alpha * A
    if np.any(lam <= 0):
        return (-np.inf, np.zeros(3)) if grad else -np.inf
    tail = T - t
    et = np.exp(-beta * tail)
    comp = mu * T + (alpha / beta) * np.sum(1.0 - et)
    ll = float(np.sum(np.log(lam)) - comp)
    if not grad:
        return ll
    inv = 1.0 / lam
    g_mu = float(np.sum(inv) - T)
    g_alpha = float(np.sum(A * inv) - np.sum(1.0 - et) / beta)
    g_beta = float(-alpha * np.sum(B * inv) + alpha / beta ** 2 * np.sum(1.0 - et)
                   - alpha / beta * np.sum(tail * et))
    return ll, np.array([g_mu, g_alpha, g_beta])


def _unpack(theta):
    u, v, w = theta
    mu = math.exp(u)
    eta = 1.0 / (1.0 + math.exp(-v))
    beta = math.exp(w)
    return mu, eta, beta


@dataclass
class HawkesFit:
    mu: float
    alpha: float
    beta: float
    loglik: float
    starts: list = field(default_factory=list)   # (start params, start loglik)

    @property
    def eta(self) -> float:
        return self.alpha / self.beta


def fit_hawkes(times, T: float | None = None, min_events: int = HAWKES_MIN_EVENTS) -> HawkesFit:
    """Multi-start L-BFGS-B maximum likelihood over (log mu, logit eta, log beta).

    Times are shifted to start at zero and rescaled so the mean inter-event
    gap is 1; the returned parameters are in the original time unit.
    """
    t = np.sort(np.asarray(times, dtype=float))
    if t.size < min_events:
        raise Underdetermined(f"{t.size} events, need {min_events}")
    t = t - t[0]
    horizon = float(T - np.min(times)) if T is not None else float(t[-1])
    if horizon <= 0:
        raise Underdetermined("zero-length observation window")
    scale = horizon / t.size
    ts, Ts = t / scale, horizon / scale

    def objective(theta):
        mu, eta, beta = _unpack(theta)
        alpha = eta * beta
        ll, g = hawkes_loglik(ts, Ts, mu, alpha, beta, grad=True)
        if not np.isfinite(ll):
            return 1e300, np.zeros(3)
        g_u = mu * g[0]
        g_v = g[1] * beta * eta * (1.0 - eta)
        g_w = g[1] * alpha + g[2] * beta
        return -ll, -np.array([g_u, g_v, g_w])

    bounds = [(-25.0, 10.0), (-18.0, 18.0), (-8.0, 8.0)]
    best = None
    starts = []
    for eta0 in (0.1, 0.5, 0.8):
        for beta0 in (0.1, 1.0, 10.0):
            mu0 = (1.0 - eta0) * ts.size / Ts
            x0 = np.array([math.log(mu0), math.log(eta0 / (1 - eta0)), math.log(beta0)])
            f0, _ = objective(x0)
            starts.append(((mu0 / scale, eta0 * beta0 / scale, beta0 / scale), -f0))
            res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds)
            cand = (res.fun, res.x) if res.fun <= f0 else (f0, x0)
            if np.isfinite(cand[0]) and cand[0] < 1e300 and (best is None or cand[0] < best[0]):
                best = cand
    if best is None:
        raise NonConvergence("no start produced a finite likelihood")
    mu, eta, beta = _unpack(best[1])
    # convert back to the original time unit; the likelihood shifts by n*log(scale)
    return HawkesFit(mu / scale, eta * beta / scale, beta / scale,
                     -best[0] - ts.size * math.log(scale), starts=[(p, ll - ts.size * math.log(scale)) for p, ll in starts])


def hawkes_branching(s: MarketSeries) -> float | None:
    try:
        return float(fit_hawkes(s.ts).eta)
    except (Underdetermined, NonConvergence):
        return None


# ---- book -------------------------------------------------------------------

@dataclass
class BookDiagnostics:
    ts: np.ndarray
    mid: np.ndarray
    spread: np.ndarray
    swings: list[dict]


def book_diagnostics(s: MarketSeries, threshold: float = SWING_THRESHOLD,
                     window: float = SWING_WINDOW) -> BookDiagnostics:
    """Mid/spread series and mid swings larger than ``threshold`` within ``window`` seconds.

    After an event the comparison set restarts at the event snapshot, so one
    step change is one event.
    """
    snaps = sorted(s.book, key=lambda b: b.timestamp)
    ts = np.array([b.timestamp for b in snaps], dtype=float)
    bid = np.array([b.best_bid for b in snaps], dtype=float)
    ask = np.array([b.best_ask for b in snaps], dtype=float)
    mid = (bid + ask) / 2.0
    spread = ask - bid
    swings = []
    lo_q: deque = deque()   # indices with increasing mid
    hi_q: deque = deque()   # indices with decreasing mid
    start = 0
    for i in range(ts.size):
        for q in (lo_q, hi_q):
            while q and (q[0] < start or ts[i] - ts[q[0]] > window):
                q.popleft()
        hit = None
        if lo_q and mid[i] - mid[lo_q[0]] > threshold:
            hit = lo_q[0]
        if hi_q and mid[hi_q[0]] - mid[i] > threshold:
            hit = hi_q[0] if hit is None else hit
        if hit is not None:
            swings.append({"market": s.market, "t_from": float(ts[hit]), "t_to": float(ts[i]),
                           "mid_from": float(mid[hit]), "mid_to": float(mid[i]),
                           "move": float(mid[i] - mid[hit])})
            start = i
            lo_q.clear()
            hi_q.clear()
        while lo_q and mid[lo_q[-1]] >= mid[i]:
            lo_q.pop()
        lo_q.append(i)
        while hi_q and mid[hi_q[-1]] <= mid[i]:
            hi_q.pop()
        hi_q.append(i)
    return BookDiagnostics(ts, mid, spread, swings)


def post_fill_adverse_selection(*_args, **_kwargs):
    """Per-address post-fill adverse-selection distributions are not implemented."""
    raise NotImplementedError("per-address post-fill adverse selection is out of scope")


# ---- panel ------------------------------------------------------------------

@dataclass
class MarketMetricsRow:
    market: str
    fill_count: int
    notional_total: float
    ofi: float | None = None
    oi_5m: float | None = None
    oi_15m: float | None = None
    oi_1h: float | None = None
    oi_4h: float | None = None
    ts_60m: float | None = None
    ts_240m: float | None = None
    ts_full: float | None = None
    pr_60m: float | None = None
    pr_240m: float | None = None
    vpin_50: float | None = None
    kyle_lambda_raw: float | None = None
    kyle_lambda_winsorized: float | None = None
    kyle_outlier: bool = False
    ils_1h: float | None = None
    ils_6h: float | None = None
    ils_24h: float | None = None
    ils_72h: float | None = None
    ils_in_scope: bool = False
    sci_uniform_60m: float | None = None
    sci_uniform_240m: float | None = None
    sci_toxicity_60m: float | None = None
    sci_toxicity_240m: float | None = None
    sci_persistence_60m: float | None = None
    sci_persistence_240m: float | None = None
    trade_size_kurtosis: float | None = None
    hawkes_branching: float | None = None
    flags: list = field(default_factory=list)

    COLUMNS = ("market", "fill_count", "notional_total", "ofi", "oi_5m", "oi_15m", "oi_1h", "oi_4h",
               "ts_60m", "ts_240m", "ts_full", "pr_60m", "pr_240m", "vpin_50",
               "kyle_lambda_raw", "kyle_lambda_winsorized", "kyle_outlier",
               "ils_1h", "ils_6h", "ils_24h", "ils_72h", "ils_in_scope",
               "sci_uniform_60m", "sci_uniform_240m", "sci_toxicity_60m", "sci_toxicity_240m",
               "sci_persistence_60m", "sci_persistence_240m",
               "trade_size_kurtosis", "hawkes_branching", "flags")

    def to_line(self) -> str:
        d = asdict(self)
        cells = []
        for c in self.COLUMNS:
            v = d[c]
            if v is None:
                cells.append("")
            elif c == "flags":
                cells.append(",".join(v))
            elif isinstance(v, bool):
                cells.append("1" if v else "0")
            elif isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        return "\t".join(cells)

    @classmethod
    def from_line(cls, line: str) -> "MarketMetricsRow":
        parts = line.rstrip("\n").split("\t")
        d = dict(zip(cls.COLUMNS, parts))
        kw = {}
        for c, v in d.items():
            if c == "market":
                kw[c] = v
            elif c == "fill_count":
                kw[c] = int(v)
            elif c in ("kyle_outlier", "ils_in_scope"):
                kw[c] = v == "1"
            elif c == "flags":
                kw[c] = [f for f in v.split(",") if f]
            else:
                kw[c] = None if v == "" else float(v)
        return cls(**kw)


def anchor_names(anchors: Sequence[float]) -> list[str]:
    if len(anchors) != 4:
        raise ValueError("exactly four ILS anchors are required")
    return ["ils_1h", "ils_6h", "ils_24h", "ils_72h"]


def market_row(s: MarketSeries, anchors: Sequence[float] = DEFAULT_ANCHORS,
               hawkes: bool = True) -> MarketMetricsRow:
    """Phase one: all per-market metrics, before the cross-market fits."""
    row = MarketMetricsRow(s.market, s.n, float(s.volume.sum()))
    row.ofi = order_flow_imbalance(s)
    for name, width in OI_WINDOWS.items():
        setattr(row, name, order_imbalance(s, width))
    row.ts_60m = two_sidedness(s, 3600.0)
    row.ts_240m = two_sidedness(s, 14400.0)
    row.ts_full = two_sidedness(s)
    row.pr_60m = persistence_ratio(s, 3600.0)
    row.pr_240m = persistence_ratio(s, 14400.0)
    row.vpin_50 = vpin(s, 50)
    try:
        row.kyle_lambda_raw = kyle_lambda(s).slope
    except Underdetermined:
        row.flags.append("kyle_underdetermined")
    names = anchor_names(anchors)
    try:
        values, row.ils_in_scope = ils(s, anchors)
        for n, v in zip(names, values):
            setattr(row, n, v)
        if not row.ils_in_scope:
            row.flags.append("ils_out_of_scope")
    except NoResolution:
        row.flags.append("ils_no_resolution")
    row.trade_size_kurtosis = trade_size_kurtosis(s)
    if row.trade_size_kurtosis is None:
        row.flags.append("kurtosis_undefined")
    if hawkes:
        row.hawkes_branching = hawkes_branching(s)
        if row.hawkes_branching is None:
            row.flags.append("hawkes_null")
    return row


def _zscores(values: Sequence[float | None]) -> list[float | None]:
    v = np.array([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return [None] * len(values)
    mean, sd = float(v.mean()), float(v.std())
    return [None if x is None else (0.0 if sd <= 0 else (x - mean) / sd) for x in values]


def sci_value(z: Sequence[float | None], weights: Sequence[float]) -> float | None:
    """Weighted z-score sum; weights of null components are dropped and the rest renormalized."""
    pairs = [(zi, w) for zi, w in zip(z, weights) if zi is not None]
    if not pairs:
        return None
    wsum = sum(w for _, w in pairs)
    return sum(zi * w for zi, w in pairs) / wsum


@dataclass
class PanelResult:
    rows: list[MarketMetricsRow]
    kyle_band: WinsorSpec
    metadata: dict


def compute_panel(series: Iterable[MarketSeries], anchors: Sequence[float] = DEFAULT_ANCHORS,
                  winsor: WinsorSpec = WinsorSpec(), hawkes: bool = True) -> PanelResult:
    rows = sorted((market_row(s, anchors, hawkes) for s in series), key=lambda r: r.market)
    band = winsor.fit([r.kyle_lambda_raw for r in rows])
    raw_idx = [i for i, r in enumerate(rows) if r.kyle_lambda_raw is not None]
    clipped, outliers = winsorize([rows[i].kyle_lambda_raw for i in raw_idx], band)
    for i, v in zip(raw_idx, clipped):
        r = rows[i]
        r.kyle_lambda_winsorized = float(v)
        r.kyle_outlier = bool(band.lo is not None and not band.lo <= r.kyle_lambda_raw <= band.hi)
    band.outlier_count = outliers

    for window, comps in SCI_COMPONENTS.items():
        z_cols = [_zscores([getattr(r, c) for r in rows]) for c in comps]
        for i, r in enumerate(rows):
            z = [col[i] for col in z_cols]
            for scheme, w in SCI_SCHEMES.items():
                setattr(r, f"sci_{scheme}_{window}", sci_value(z, w))

    meta = {
        "anchors_seconds": list(anchors),
        "kyle_bin_seconds": KYLE_BIN,
        "kyle_band": [band.lo, band.hi],
        "kyle_outliers": outliers,
        "sci_canonical": False,
        "sci_components": {k: list(v) for k, v in SCI_COMPONENTS.items()},
        "sci_weights": {k: list(v) for k, v in SCI_SCHEMES.items()},
        "logit_delta": LOGIT_DELTA,
    }
    return PanelResult(rows, band, meta)


def write_metrics(rows: Sequence[MarketMetricsRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(MarketMetricsRow.COLUMNS) + "\n")
        for r in rows:
            fh.write(r.to_line() + "\n")


def read_metrics(path) -> list[MarketMetricsRow]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != MarketMetricsRow.COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header")
        return [MarketMetricsRow.from_line(line) for line in fh if line.strip()]


def parse_duration(text: str) -> float:
    """'90s', '5m', '1h', '3d' -> seconds."""
    text = text.strip().lower()
    units = {"s": 1, "m": 60, "h": 3600, "d": 86400}
    if text and text[-1] in units:
        return float(text[:-1]) * units[text[-1]]
    return float(text)
