"""Feedback report and the aggregate-only public bundle."""

from __future__ import annotations

import hashlib
import json
import re
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tiers import ACTIVE_RETAIL, EPISODIC_RETAIL, TIERS

RETAIL_TIERS = (ACTIVE_RETAIL, EPISODIC_RETAIL)
ADDRESS_RE = re.compile(r"0x[0-9a-fA-F]{40}(?![0-9a-fA-F])")


class PrivacyViolation(AssertionError):
    pass


def retail_ratio(per_address: Mapping[str, tuple[float, int]], groups: Mapping[str, str],
                 retail: Sequence[str] = RETAIL_TIERS, synthetic_notional: float = 1000.0,
                 decimals: int = 3) -> dict:
    """Pooled per-fill notional of retail-proximate groups over a fixed synthetic per-fill notional.

    ``per_address`` maps address -> (total notional, fill count).
    """
    notional = fills = 0
    for a, (v, n) in per_address.items():
        if groups.get(a) in retail:
            notional += v
            fills += n
    out = {"retail_groups": list(retail), "synthetic_notional": synthetic_notional}
    if fills == 0:
        out.update(mean_per_fill=None, ratio=None, ratio_rounded=None,
                   reason="no fills from retail-proximate groups")
        return out
    mean = notional / fills
    ratio = mean / synthetic_notional
    out.update(mean_per_fill=mean, ratio=ratio, ratio_rounded=round(ratio, decimals))
    return out


def whale_summary(tier_rows: Sequence[dict], total_notional: float) -> dict:
    whales = [r for r in tier_rows if r["whale"]]
    by_tier = {t: sum(1 for r in whales if r["tier"] == t) for t in TIERS}
    wn = float(sum(r["notional"] for r in whales))
    return {
        "n_whale": len(whales),
        "n_by_notional": sum(1 for r in whales if r["whale_by_notional"]),
        "n_by_share": sum(1 for r in whales if r["whale_by_share"]),
        "n_by_notional_only": sum(1 for r in whales if r["whale_by_notional"] and not r["whale_by_share"]),
        "whale_notional_share": wn / total_notional if total_notional > 0 else None,
        "tier_distribution": by_tier,
    }


def feedback_report(tier_rows: Sequence[dict], concentration: dict, synthetic_notional: float = 1000.0,
                    retail: Sequence[str] = RETAIL_TIERS) -> dict:
    per_address = {r["address"]: (r["notional"], r["n_fills"]) for r in tier_rows}
    groups = {r["address"]: r["tier"] for r in tier_rows}
    totals = np.array([r["notional"] for r in tier_rows], dtype=float)
    total = float(totals.sum())
    return {
        "t3_retail_notional": {
            **retail_ratio(per_address, groups, retail, synthetic_notional),
            "per_address_total_median": float(np.median(totals)) if totals.size else None,
            "per_address_total_mean": float(totals.mean()) if totals.size else None,
        },
        "t5_whale_overlay": whale_summary(tier_rows, total),
        "concentration": concentration,
    }


def _fmt(v, nd=4):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{nd}g}"
    return str(v)


def render_markdown(report: dict, figures: Iterable[str] = ()) -> str:
    t3 = report["feedback"]["t3_retail_notional"]
    t5 = report["feedback"]["t5_whale_overlay"]
    conc = report["feedback"]["concentration"]
    lines = ["# fillscope run report", ""]
    lines += ["## Validity gates", ""]
    g = report["gates"]
    lines += [f"- G-FILL: {g['g_fill']}", f"- G-QUOTE-LIFE: {g['g_quote_life']}", f"- G-BOOK: {g['g_book']}",
              f"- enabled features: {', '.join(g['enabled_features']) or 'none'}",
              f"- withdrawn analyses: {', '.join(w['id'] for w in g['withdrawn_analyses']) or 'none'}", ""]
    if "cluster" in report:
        c = report["cluster"]
        lines += ["## Clustering protocol", "", f"- stage reached: {c['stage_reached']}",
                  f"- DBSCAN grid unimodal: {c['unimodal']}"]
        if c.get("k_star") is not None:
            sil = ", ".join(f"k={k}: {v:.3f}" for k, v in sorted(c["silhouettes"].items(), key=lambda kv: int(kv[0])))
            lines += [f"- k*: {c['k_star']} (silhouette {sil})"]
        lines.append("")
    lines += ["## Tiers", "", "| tier | addresses | notional share |", "|---|---:|---:|"]
    for name, d in conc.get("group_shares", {}).items():
        lines.append(f"| {name} | {d['n']} | {d['notional_share']:.4f} |")
    lines += ["", f"Gini over per-address notional: {conc['gini']:.3f}", ""]
    lines += ["## Feedback tests", "",
              f"- T3 retail per-fill mean: {_fmt(t3['mean_per_fill'])} USDC vs {t3['synthetic_notional']:g}"
              f" synthetic; ratio {_fmt(t3['ratio_rounded'])}"
              + (f" ({t3['reason']})" if t3.get("reason") else ""),
              f"- T5 whale overlay: {t5['n_whale']} addresses ({t5['n_by_notional']} by total notional,"
              f" {t5['n_by_share']} by single-market share)", ""]
    if "metrics" in report:
        m = report["metrics"]
        lines += ["## Metric panel", "", f"- markets: {m['n_markets']}",
                  f"- Kyle lambda band: {m['kyle_band']}, outliers: {m['kyle_outliers']}",
                  f"- ILS in scope: {m['ils_in_scope']}", "- SCI weights are a non-canonical default", ""]
    if "bilateral" in report:
        b = report["bilateral"]
        lines += ["## Bilateral tests", "",
                  f"- {b['n_significant']} of {b['n_tested']} tested pairs pass BH-FDR at alpha={b['alpha']}"
                  f" ({b['n_results']} pairs total)", ""]
    if "detect" in report:
        d = report["detect"]
        lines += ["## Candidate patterns (upper bounds)", "",
                  f"- wash-volume candidates: {d['wash']['n_candidates']}",
                  f"- co-occurrence components with >1 address: {d['components']['n_nontrivial']}",
                  f"- cross-market pair events: {d['cross_market_pairs']}",
                  f"- negRisk episodes: {sum(len(v['episodes']) for v in d['negrisk'].values())}",
                  f"- markets with book swings: {d['swings']['n_markets_with_swings']}", ""]
    figs = list(figures)
    if figs:
        lines += ["## Figures", ""] + [f"![{f}](figures/{f})" for f in figs] + [""]
    return "\n".join(lines)


def scrub_check(blob: bytes | str, addresses: Iterable[str]) -> None:
    """Raise if any corpus address, or anything shaped like one, appears in ``blob``."""
    text = blob.decode("utf-8") if isinstance(blob, bytes) else blob
    low = text.lower()
    # match on the 40-hex body so a stripped 0x prefix still counts
    leaked = sorted({a for a in addresses if a.lower().removeprefix("0x") in low})
    if leaked:
        raise PrivacyViolation(f"{len(leaked)} corpus addresses present in public output")
    m = ADDRESS_RE.search(text)
    if m:
        raise PrivacyViolation("address-shaped identifier present in public output")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default).encode("utf-8")


def _default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def emit_bundle(parts: dict, addresses: Iterable[str], privacy: bool = True,
                private_tables: dict | None = None) -> tuple[bytes, str]:
    """Serialize the bundle; with privacy on, assert that no address survives.

    Returns (bytes, sha256).
    """
    bundle = dict(parts)
    bundle["privacy"] = privacy
    if not privacy and private_tables:
        bundle["address_tables"] = private_tables
    blob = canonical_json(bundle)
    if privacy:
        scrub_check(blob, addresses)
    return blob, hashlib.sha256(blob).hexdigest()
