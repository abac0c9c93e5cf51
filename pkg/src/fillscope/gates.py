"""Pre-registered validity gates.

Gates are evaluated from capabilities the corpus *declares* in its header, not
from what happens to appear in a sample window: an empty quote stream cannot
tell "the venue has no quote events" apart from "none occurred".
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable

PASS = "PASS"
PARTIAL = "PARTIAL"
FAIL = "FAIL"

FILL_FEATURES = ("f2", "f3", "f5", "f6", "f7", "f9")
QUOTE_FEATURES = ("f1", "f4", "f8")
ALL_FEATURES = tuple(sorted(FILL_FEATURES + QUOTE_FEATURES, key=lambda f: int(f[1:])))

# analysis id -> reason, keyed by the gate whose failure withdraws it
QUOTE_LIFE_ANALYSES = {
    "spoof_non_fill": "requires OrderPlaced/OrderCancelled attribution (off-chain on this venue)",
    "coordinated_withdrawal": "requires address-level quote cancellations",
    "posted_spread": "requires posted-quote lifecycle; only fill-side spread proxies remain",
    "quote_lifetime": "requires quote place/cancel timestamps",
    "reprice_frequency": "requires quote update events",
}
FILL_ANALYSES = {
    "address_clustering": "no maker/taker attribution on fills",
    "tier_stratification": "no maker/taker attribution on fills",
    "bilateral": "per-market group shares need fill attribution",
    "wash_candidates": "needs per-address buy/sell attribution",
    "cross_market_pairs": "needs per-address fill attribution",
}
BOOK_ANALYSES = {
    "book_diagnostics": "no book snapshots in corpus",
    "book_swings": "no book snapshots in corpus",
}
ADDRESS_BOOK_ANALYSES = {
    "address_level_book_attribution": "book snapshots are market-level only",
}

G_ADDR_DOWNGRADE_THRESHOLD = 0.20


class BookGranularity(str, Enum):
    NONE = "NONE"
    MARKET_LEVEL = "MARKET_LEVEL"
    ADDRESS_LEVEL = "ADDRESS_LEVEL"


@dataclass(frozen=True)
class CorpusCapabilities:
    has_fill_attribution: bool
    has_quote_lifecycle: bool
    has_book_snapshots: bool
    book_granularity: BookGranularity = BookGranularity.NONE

    def __post_init__(self):
        object.__setattr__(self, "book_granularity", BookGranularity(self.book_granularity))
        if self.has_book_snapshots and self.book_granularity is BookGranularity.NONE:
            raise ValueError("book snapshots declared without a granularity")
        if not self.has_book_snapshots and self.book_granularity is not BookGranularity.NONE:
            raise ValueError("book granularity declared without book snapshots")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusCapabilities":
        return cls(
            has_fill_attribution=bool(d.get("has_fill_attribution", False)),
            has_quote_lifecycle=bool(d.get("has_quote_lifecycle", False)),
            has_book_snapshots=bool(d.get("has_book_snapshots", False)),
            book_granularity=d.get("book_granularity", "NONE"),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["book_granularity"] = self.book_granularity.value
        return d


# The venue studied here: fills settle on-chain, quotes live off-chain, and the
# supplementary archive carries market-level best bid/ask.
ONCHAIN_CLOB = CorpusCapabilities(True, False, True, BookGranularity.MARKET_LEVEL)


@dataclass
class GateReport:
    g_fill: str
    g_quote_life: str
    g_book: str
    enabled_features: list[str]
    withdrawn_analyses: list[dict] = field(default_factory=list)
    g_addr: dict | None = None

    def withdrawn_ids(self) -> set[str]:
        return {w["id"] for w in self.withdrawn_analyses}

    def is_enabled(self, feature: str) -> bool:
        return feature in self.enabled_features

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GateReport":
        return cls(**d)


def evaluate_gates(caps: CorpusCapabilities) -> GateReport:
    g_fill = PASS if caps.has_fill_attribution else FAIL
    g_quote = PASS if caps.has_quote_lifecycle else FAIL
    if caps.has_book_snapshots and caps.book_granularity is BookGranularity.ADDRESS_LEVEL:
        g_book = PASS
    elif caps.has_book_snapshots and caps.book_granularity is BookGranularity.MARKET_LEVEL:
        g_book = PARTIAL
    else:
        g_book = FAIL

    enabled = set()
    withdrawn: dict[str, str] = {}
    if g_fill == PASS:
        enabled.update(FILL_FEATURES)
    else:
        withdrawn.update(FILL_ANALYSES)
    if g_quote == PASS:
        enabled.update(QUOTE_FEATURES)
    else:
        withdrawn.update(QUOTE_LIFE_ANALYSES)
    if g_book == FAIL:
        withdrawn.update(BOOK_ANALYSES)
    elif g_book == PARTIAL:
        withdrawn.update(ADDRESS_BOOK_ANALYSES)

    return GateReport(
        g_fill=g_fill,
        g_quote_life=g_quote,
        g_book=g_book,
        enabled_features=[f for f in ALL_FEATURES if f in enabled],
        withdrawn_analyses=[{"id": k, "reason": withdrawn[k]} for k in sorted(withdrawn)],
    )


def address_resolution_fraction(records: Iterable, contract_addresses: Iterable[str],
                                threshold: float = G_ADDR_DOWNGRADE_THRESHOLD) -> dict:
    """Share of fill notional touching addresses annotated as unresolved contracts.

    Only the fraction is computed; trace-level router resolution is not
    attempted. ``downgrade`` signals execution-entity rather than trader
    clustering.
    """
    contracts = {a.lower() for a in contract_addresses}
    total = 0
    routed = 0
    for r in records:
        total += r.notional_e6
        if r.maker in contracts or r.taker in contracts:
            routed += r.notional_e6
    frac = routed / total if total else 0.0
    return {"routed_fraction": frac, "threshold": threshold, "downgrade": frac > threshold}
