"""Stage orchestration over a work directory.

Each stage reads its inputs from files written by earlier stages, so any
stage can be re-run on its own. Every stage records input hashes, a
parameter hash, output hashes and wall time in ``run_manifest.json``.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import bilateral, cluster, features, gates, ingest, micropanel, patterns, plotting, report, tiers

log = logging.getLogger("fillscope")

STAGES = ("ingest", "gates", "features", "cluster", "tiers", "metrics", "bilateral", "detect", "report", "bundle")
RPC_ENV = "FILLSCOPE_RPC_URLS"

# analysis id that must not be withdrawn for a stage to run
STAGE_REQUIRES = {
    "features": "address_clustering",
    "cluster": "address_clustering",
    "tiers": "tier_stratification",
    "bilateral": "bilateral",
}

DEFAULTS = {
    "work_dir": "work",
    "stages": list(STAGES),
    "privacy": True,
    "ingest": {
        "source": None,            # corpus:<tsv> | logs:<jsonl> | rpc
        "block_times": None,
        "from_block": None,
        "to_block": None,
        "chunk_size": ingest.DEFAULT_CHUNK_SIZE,
        "retries": ingest.DEFAULT_RETRIES,
        "max_in_flight": 4,
        "exclude_venue": ingest.CTF_EXCHANGE,
        "capabilities": gates.ONCHAIN_CLOB.to_dict(),
        "contract_addresses": [],
    },
    "markets": None,               # JSON metadata: p_open, p_res, t_res, group, book
    "features": {"min_fills": 5, "hhi_weight": "count", "scaler": "winsor_z",
                 "upper_quantile": 0.995, "n_buckets": 8},
    "cluster": {"eps": list(cluster.PAPER_EPS_GRID), "min_pts": list(cluster.PAPER_MIN_PTS),
                "cluster_cap": cluster.CLUSTER_CAP, "noise_threshold": cluster.NOISE_THRESHOLD,
                "k_range": [3, 4, 5, 6, 7], "seed": 0, "restarts": 10, "hdbscan_labels": None},
    "tiers": {"whale_notional": 1_000_000.0, "whale_single_market_share": 0.005,
              "hfo_f2": 0.95, "hfo_f9": 0.75, "hbo_f9": 0.95, "power_f2": 0.75,
              "power_notional": 0.75, "episodic_cap": 10_000.0,
              "f2_grid": [0.90, 0.95, 0.99], "f9_grid": [0.90, 0.95, 0.99]},
    "metrics": {"anchors": ["1h", "6h", "24h", "72h"], "hawkes": True,
                "winsor": [0.01, 0.99], "swing_threshold": micropanel.SWING_THRESHOLD,
                "swing_window": micropanel.SWING_WINDOW},
    "bilateral": {"alpha": 0.05, "boot": 2000, "seed": 0, "group_by": "tier", "level": 0.95},
    "detect": {"wash": True, "negrisk": True, "swings": True,
               "gross_min": patterns.WASH_GROSS_MIN, "net_ratio_max": patterns.WASH_NET_RATIO_MAX,
               "delta_wash": patterns.DELTA_WASH, "delta_arb": patterns.DELTA_ARB,
               "sign_rule": "opposite", "negrisk_threshold": patterns.NEGRISK_THRESHOLD,
               "min_edge_weight": 1},
    "report": {"synthetic_notional": 1000.0, "retail_groups": list(report.RETAIL_TIERS)},
}


class StageError(RuntimeError):
    pass


class GateWithdrawn(RuntimeError):
    pass


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        cfg = deep_merge(cfg, json.loads(Path(path).read_text()))
    if overrides:
        cfg = deep_merge(cfg, overrides)
    unknown = [s for s in cfg["stages"] if s not in STAGES]
    if unknown:
        raise StageError(f"unknown stages: {unknown}")
    return cfg


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def path(self, name: str) -> Path:
        return self.root / name

    @property
    def corpus(self) -> Path:
        return self.root / "corpus" / "fills.tsv"

    @property
    def manifest(self) -> Path:
        return self.root / "run_manifest.json"

    def require(self, stage: str, *names: str) -> list[Path]:
        out = []
        for n in names:
            p = self.path(n) if n != "corpus" else self.corpus
            if not p.exists():
                raise StageError(f"stage '{stage}' needs {p}; run the stage that produces it first")
            out.append(p)
        return out


@dataclass
class StageRecord:
    inputs: dict
    parameter_hash: str
    outputs: dict
    wall_time_seconds: float
    notes: dict = field(default_factory=dict)


def _hash_files(paths) -> dict:
    return {str(p.name if p.parent.name != "figures" else f"figures/{p.name}"): ingest.file_sha256(p)
            for p in sorted(paths, key=str) if p.exists()}


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(json.dumps(obj, indent=2, sort_keys=True, default=report._default).encode() + b"\n")
    return path


def _read_json(path: Path):
    return json.loads(Path(path).read_text())


def _load_gates(ws: Workspace) -> gates.GateReport:
    return gates.GateReport.from_dict(_read_json(ws.require("gates", "gates.json")[0]))


def _markets_meta(cfg: dict) -> dict:
    if not cfg.get("markets"):
        return {}
    p = Path(cfg["markets"])
    if not p.exists():
        raise StageError(f"markets metadata {p} does not exist")
    return _read_json(p)


# ---- stages -----------------------------------------------------------------

def stage_ingest(ws: Workspace, cfg: dict) -> tuple[list, list, dict]:
    c = cfg["ingest"]
    src = c["source"]
    t0 = time.perf_counter()
    quarantined = []
    filt = None
    inputs = []
    if not src:
        raise StageError("ingest needs a source: corpus:<tsv>, logs:<jsonl> or rpc")
    if src.startswith("corpus:"):
        p = Path(src.split(":", 1)[1])
        if not p.exists():
            raise StageError(f"corpus {p} does not exist")
        records = ingest.read_corpus(p, verify=ingest.manifest_path(p).exists())
        caps = ingest.read_capabilities(p) or c["capabilities"]
        inputs.append(p)
    else:
        if c["block_times"]:
            resolver = ingest.BlockTimeResolver.from_file(c["block_times"])
            inputs.append(Path(c["block_times"]))
        else:
            resolver = None
        if src.startswith("logs:"):
            p = Path(src.split(":", 1)[1])
            if not p.exists():
                raise StageError(f"log file {p} does not exist")
            endpoint = ingest.FixtureEndpoint.from_file(p)
            entries = sorted((ingest.RawLogEntry.from_rpc(o) for o in endpoint.logs
                              if o["topics"] and o["topics"][0].lower() == ingest.ORDER_FILLED_TOPIC),
                             key=lambda e: (e.block_number, e.log_index))
            inputs.append(p)
        elif src == "rpc":
            urls = [u for u in os.environ.get(RPC_ENV, "").split(",") if u.strip()]
            if not urls:
                raise StageError(f"rpc source needs endpoints in ${RPC_ENV}")
            if c["from_block"] is None or c["to_block"] is None:
                raise StageError("rpc source needs from_block and to_block")
            endpoints = [ingest.JsonRpcEndpoint(u.strip()) for u in urls]
            filt = ingest.LogFilterSpec(int(c["from_block"]), int(c["to_block"]),
                                        chunk_size=int(c["chunk_size"]))
            entries = list(ingest.fetch_logs(filt, endpoints, retries=int(c["retries"]),
                                             max_in_flight=int(c["max_in_flight"])))
            if resolver is None:
                resolver = ingest.BlockTimeResolver({}, endpoints[0])
        else:
            raise StageError(f"unknown ingest source {src!r}")
        records, quarantined = ingest.decode_all(entries, resolver=resolver)
        caps = c["capabilities"]
    removed = 0
    if c["exclude_venue"]:
        records, removed = ingest.exclude_venue(records, c["exclude_venue"])
    params = {k: c[k] for k in ("exclude_venue", "chunk_size", "retries")}
    manifest = ingest.write_corpus(records, ws.corpus, capabilities=caps, input_descriptor=src,
                                   filter_spec=filt, parameters=params, quarantined=quarantined, started=t0)
    notes = {"records": manifest.record_count, "quarantined": len(quarantined), "venue_rows_removed": removed,
             "content_hash": manifest.content_hash}
    return inputs, [ws.corpus], notes


def stage_gates(ws: Workspace, cfg: dict):
    (corpus,) = ws.require("gates", "corpus")
    caps = gates.CorpusCapabilities.from_dict(ingest.read_capabilities(corpus))
    rep = gates.evaluate_gates(caps)
    contracts = cfg["ingest"].get("contract_addresses") or []
    if contracts:
        rep.g_addr = gates.address_resolution_fraction(ingest.read_corpus(corpus), contracts)
    out = _write_json(ws.path("gates.json"), json.loads(rep.to_json()))
    return [corpus], [out], {"withdrawn": sorted(rep.withdrawn_ids())}


ADDRESS_COLUMNS = ("address", "n_fills", "notional", "max_market_share", "degenerate_notional",
                   "f2", "f3", "f5", "f6", "f7", "f9", "z2", "z3", "z5", "z6", "z7", "z9")


def stage_features(ws: Workspace, cfg: dict):
    corpus, gpath = ws.require("features", "corpus", "gates.json")
    c = cfg["features"]
    gate_rep = _load_gates(ws)
    records = ingest.read_corpus(corpus)
    aggs = features.aggregate_partitioned(records, int(c["n_buckets"]))
    active = features.activity_filter(aggs, int(c["min_fills"]))
    if len(active) < 2:
        raise StageError(f"only {len(active)} addresses pass the activity filter")
    totals = features.market_totals(records)
    addrs = sorted(active)
    vecs = [features.compute_features(active[a], gate_rep, c["hhi_weight"]) for a in addrs]
    raw = features.feature_matrix(vecs)
    state = features.fit_scaler(raw, c["scaler"], float(c["upper_quantile"]))
    z = features.apply_scaler(state, raw)
    out = ws.path("addresses.tsv")
    with open(out, "w") as fh:
        fh.write("\t".join(ADDRESS_COLUMNS) + "\n")
        for a, v, zr in zip(addrs, vecs, z):
            g = active[a]
            cells = [a, str(g.n_fills), ingest.format_fixed(g.total_notional_e6),
                     repr(features.max_market_share(g, totals)), "1" if v.degenerate_notional else "0"]
            cells += [repr(x) for x in v.raw()] + [repr(float(x)) for x in zr]
            fh.write("\t".join(cells) + "\n")
    spath = ws.path("scaler.json")
    spath.write_text(state.to_json() + "\n")
    notes = {"addresses_total": len(aggs), "addresses_active": len(active)}
    return [corpus, gpath], [out, spath], notes


def read_addresses(path: Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != ADDRESS_COLUMNS:
            raise StageError(f"{path}: unexpected header")
        for line in fh:
            p = line.rstrip("\n").split("\t")
            row = {"address": p[0], "n_fills": int(p[1]), "notional": float(p[2]),
                   "max_market_share": float(p[3]), "degenerate_notional": p[4] == "1"}
            for name, val in zip(ADDRESS_COLUMNS[5:], p[5:]):
                row[name] = float(val)
            rows.append(row)
    return rows


def stage_cluster(ws: Workspace, cfg: dict):
    (apath,) = ws.require("cluster", "addresses.tsv")
    c = cfg["cluster"]
    rows = read_addresses(apath)
    z = np.array([[r[k] for k in ("z2", "z3", "z5", "z6", "z7", "z9")] for r in rows])
    grid = cluster.dbscan_grid(z, c["eps"], c["min_pts"])
    hd = []
    inputs = [apath]
    if c.get("hdbscan_labels"):
        hp = Path(c["hdbscan_labels"])
        lab = _read_json(hp)
        hd = [cluster.ClusterOutcome.from_labels([lab.get(r["address"], -1) for r in rows], source="hdbscan")]
        inputs.append(hp)
    verdict = cluster.evaluate_protocol(grid.outcomes, hd, c["cluster_cap"], c["noise_threshold"])
    summary = {**verdict.to_dict(), "grid": grid.summary()}
    summary["suggested_epsilon"] = cluster.suggest_epsilon(z, k=int(min(c["min_pts"])))
    labels = verdict.final_labels
    if verdict.stage_reached == cluster.KMEANS_FALLBACK:
        ks = [k for k in c["k_range"] if 2 <= k < len(rows)]
        k_star, sil, fits = cluster.select_k(z, ks, seed=int(c["seed"]), restarts=int(c["restarts"]))
        best = fits[k_star]
        labels = best.labels
        summary.update(k_star=k_star, silhouettes={str(k): v for k, v in sil.items()},
                       centroids=best.centroids.tolist(), inertia=best.inertia,
                       cluster_sizes=np.bincount(best.labels, minlength=k_star).tolist())
    out = _write_json(ws.path("cluster.json"), summary)
    lpath = ws.path("cluster_labels.tsv")
    with open(lpath, "w") as fh:
        fh.write("address\tcluster\n")
        for r, l in zip(rows, labels if labels is not None else [-1] * len(rows)):
            fh.write(f"{r['address']}\t{int(l)}\n")
    return inputs, [out, lpath], {"stage_reached": verdict.stage_reached}


def _read_labels(path: Path) -> dict[str, str]:
    with open(path) as fh:
        fh.readline()
        return dict(line.rstrip("\n").split("\t")[:2] for line in fh if line.strip())


TIER_COLUMNS = ("address", "tier", "whale", "whale_by_notional", "whale_by_share", "n_fills", "notional")


def _thresholds(cfg: dict) -> tiers.TierThresholds:
    t = cfg["tiers"]
    return tiers.TierThresholds(**{k: t[k] for k in tiers.TierThresholds.__dataclass_fields__})


def read_tiers(path: Path) -> list[dict]:
    out = []
    with open(path) as fh:
        fh.readline()
        for line in fh:
            p = line.rstrip("\n").split("\t")
            out.append({"address": p[0], "tier": p[1], "whale": p[2] == "1",
                        "whale_by_notional": p[3] == "1", "whale_by_share": p[4] == "1",
                        "n_fills": int(p[5]), "notional": float(p[6])})
    return out


def stage_tiers(ws: Workspace, cfg: dict):
    (apath,) = ws.require("tiers", "addresses.tsv")
    rows = read_addresses(apath)
    th = _thresholds(cfg)
    inp = tiers.TierInputs.build([r["address"] for r in rows], [r["f2"] for r in rows],
                                 [r["f9"] for r in rows], [r["notional"] for r in rows],
                                 [r["max_market_share"] for r in rows])
    labels = tiers.classify_tiers(inp, th)
    out = ws.path("tiers.tsv")
    with open(out, "w") as fh:
        fh.write("\t".join(TIER_COLUMNS) + "\n")
        for r in rows:
            l = labels[r["address"]]
            fh.write("\t".join([r["address"], l.tier, str(int(l.whale)), str(int(l.whale_by_notional)),
                                str(int(l.whale_by_share)), str(r["n_fills"]),
                                ingest.format_fixed(int(round(r["notional"] * 1e6)))]) + "\n")
    notional = {r["address"]: r["notional"] for r in rows}
    conc = tiers.concentration(notional, {a: l.tier for a, l in labels.items()})
    whale_conc = tiers.concentration(notional, {a: ("WHALE" if l.whale else "NON_WHALE") for a, l in labels.items()})
    strict = sum(notional[a] for a, l in labels.items() if l.whale or l.tier in tiers.STRICT_NON_RETAIL)
    summary = {
        "n": len(rows),
        "counts": {t: sum(1 for l in labels.values() if l.tier == t) for t in tiers.TIERS},
        "whale": sum(l.whale for l in labels.values()),
        "whale_by_notional": sum(l.whale_by_notional for l in labels.values()),
        "whale_by_share": sum(l.whale_by_share for l in labels.values()),
        "cutoffs": tiers.fit_cutoffs(inp, th).__dict__,
        "sensitivity": tiers.tier_sensitivity(inp, cfg["tiers"]["f2_grid"], cfg["tiers"]["f9_grid"], th),
        "concentration": {"gini": conc.gini, "top_shares": conc.top_shares, "group_shares": conc.group_shares,
                          "whale_split": whale_conc.group_shares, "lorenz": conc.lorenz_points(),
                          "strict_non_retail_share": strict / max(sum(notional.values()), 1e-300)},
    }
    inputs = [apath]
    lpath = ws.path("cluster_labels.tsv")
    if lpath.exists():
        cl = {a: int(v) for a, v in _read_labels(lpath).items()}
        summary["crosstab"] = tiers.crosstab(labels, cl)
        inputs.append(lpath)
    spath = _write_json(ws.path("tiers_summary.json"), summary)
    return inputs, [out, spath], {"counts": summary["counts"]}


def stage_metrics(ws: Workspace, cfg: dict):
    (corpus,) = ws.require("metrics", "corpus")
    c = cfg["metrics"]
    meta = _markets_meta(cfg)
    records = ingest.read_corpus(corpus)
    series = micropanel.series_from_fills(records, meta)
    anchors = [micropanel.parse_duration(a) if isinstance(a, str) else float(a) for a in c["anchors"]]
    lo, hi = c["winsor"]
    panel = micropanel.compute_panel(series.values(), anchors, micropanel.WinsorSpec(lo, hi), bool(c["hawkes"]))
    out = ws.path("metrics.tsv")
    micropanel.write_metrics(panel.rows, out)
    gate_rep = _load_gates(ws) if ws.path("gates.json").exists() else None
    swings = {}
    if gate_rep is None or "book_swings" not in gate_rep.withdrawn_ids():
        for m, s in series.items():
            if s.book:
                swings[m] = micropanel.book_diagnostics(s, c["swing_threshold"], c["swing_window"]).swings
    meta_out = dict(panel.metadata)
    meta_out["n_markets"] = len(panel.rows)
    meta_out["ils_in_scope"] = sum(r.ils_in_scope for r in panel.rows)
    meta_out["swings"] = swings
    mpath = _write_json(ws.path("metrics_meta.json"), meta_out)
    inputs = [corpus] + ([Path(cfg["markets"])] if cfg.get("markets") else [])
    return inputs, [out, mpath], {"markets": len(panel.rows)}


def stage_bilateral(ws: Workspace, cfg: dict):
    c = cfg["bilateral"]
    label_file = "tiers.tsv" if c["group_by"] == "tier" else "cluster_labels.tsv"
    corpus, mpath, lpath = ws.require("bilateral", "corpus", "metrics.tsv", label_file)
    labels = _read_labels(lpath)
    records = ingest.read_corpus(corpus)
    shares = bilateral.share_matrix(bilateral.archetype_shares(records, labels))
    rows = micropanel.read_metrics(mpath)
    metrics = {m: {r.market: getattr(r, m) for r in rows} for m in micropanel.METRIC_NAMES}
    results = bilateral.run_bilateral(shares, metrics, float(c["alpha"]), int(c["seed"]), int(c["boot"]),
                                      float(c["level"]))
    summary = bilateral.summarize(results, float(c["alpha"]))
    summary["group_by"] = c["group_by"]
    out = ws.path("bilateral.tsv")
    bilateral.write_results(results, out, summary)
    return [corpus, mpath, lpath], [out, ws.path("bilateral.json")], summary


def stage_detect(ws: Workspace, cfg: dict):
    (corpus,) = ws.require("detect", "corpus")
    c = cfg["detect"]
    meta = _markets_meta(cfg)
    records = ingest.read_corpus(corpus)
    aggs = features.aggregate(records)
    params = {k: c[k] for k in ("gross_min", "net_ratio_max", "delta_wash")}
    result: dict = {}
    private: dict = {}
    if c["wash"]:
        cands = patterns.detect_wash(aggs, records, c["gross_min"], c["net_ratio_max"], c["delta_wash"])
        result["wash"] = patterns.wash_summary(cands, params)
        private["wash_candidates"] = [c_.__dict__ for c_ in cands]
    graph = patterns.co_occurrence(records)
    comps = patterns.connected_components(graph, int(c["min_edge_weight"]))
    result["components"] = patterns.component_summary(comps)
    private["components"] = [cp for cp in comps if len(cp) > 1]
    groups = {m: v["group"] for m, v in meta.items() if v.get("group")}
    pairs = patterns.cross_market_pairs(records, groups, c["delta_arb"], c["sign_rule"]) if groups else []
    result["cross_market_pairs"] = len(pairs)
    result["cross_market_sign_rule"] = c["sign_rule"]
    private["cross_market_pairs"] = [p.__dict__ for p in pairs]
    result["negrisk"] = {}
    if c["negrisk"] and groups:
        for g, tl in sorted(patterns.negrisk_timelines(records, groups).items()):
            if len(tl) < 2:
                continue
            nr = patterns.negrisk_deviation(g, tl, c["negrisk_threshold"])
            result["negrisk"][g] = {"episodes": [e.__dict__ for e in nr.episodes],
                                    "integrated_abs": nr.integrated_abs,
                                    "max_abs": float(np.max(np.abs(nr.deviation))) if nr.deviation.size else 0.0}
    swings = {}
    if c["swings"] and ws.path("metrics_meta.json").exists():
        swings = _read_json(ws.path("metrics_meta.json")).get("swings", {})
    result["swings"] = patterns.swing_report(swings)
    out = _write_json(ws.path("detect.json"), result)
    outs = [out]
    if not cfg["privacy"]:
        outs.append(_write_json(ws.path("detect_private.json"), private))
    return [corpus], outs, {"wash": result.get("wash", {}).get("n_candidates")}


def _figures(ws: Workspace, tiers_summary: dict, cluster_summary: dict | None,
             metrics_rows, metrics_meta, bil_rows) -> list[str]:
    fig_dir = ws.path("figures")
    made = []
    conc = tiers_summary["concentration"]
    lx, ly = zip(*conc["lorenz"])
    made.append(plotting.lorenz(lx, ly, conc["gini"], fig_dir / "lorenz.png"))
    made.append(plotting.tier_concentration(conc["group_shares"], fig_dir / "tier_concentration.png"))
    if "crosstab" in tiers_summary:
        made.append(plotting.crosstab_heatmap(tiers_summary["crosstab"], fig_dir / "crosstab.png"))
    if cluster_summary and cluster_summary.get("centroids"):
        made.append(plotting.kmeans_centroids(np.array(cluster_summary["centroids"]),
                                              features.FEATURE_NAMES, fig_dir / "kmeans_centroids.png"))
    if metrics_rows is not None:
        raw = [r.kyle_lambda_raw for r in metrics_rows if r.kyle_lambda_raw is not None]
        made.append(plotting.kyle_lambda(raw, tuple(metrics_meta["kyle_band"]), fig_dir / "kyle_lambda.png"))
    if bil_rows:
        groups = sorted({r["group"] for r in bil_rows})
        mets = [m for m in micropanel.METRIC_NAMES if any(r["metric"] == m for r in bil_rows)]
        rho = np.full((len(groups), len(mets)), np.nan)
        sig = np.zeros_like(rho, dtype=bool)
        for r in bil_rows:
            i, j = groups.index(r["group"]), mets.index(r["metric"])
            rho[i, j] = np.nan if r["rho"] is None else r["rho"]
            sig[i, j] = r["significant"]
        made.append(plotting.bilateral_heatmap(groups, mets, rho, sig, fig_dir / "bilateral_heatmap.png"))
    return made


def _read_bilateral(path: Path) -> list[dict]:
    out = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            d = dict(zip(header, line.rstrip("\n").split("\t")))
            out.append({"group": d["group"], "metric": d["metric"], "n": int(d["n"]),
                        "rho": float(d["rho"]) if d["rho"] else None,
                        "q_value": float(d["q_value"]) if d["q_value"] else None,
                        "ci_low": float(d["ci_low"]) if d["ci_low"] else None,
                        "ci_high": float(d["ci_high"]) if d["ci_high"] else None,
                        "significant": d["significant"] == "1"})
    return out


def _assemble(ws: Workspace, cfg: dict) -> tuple[dict, list[Path]]:
    """Aggregate-only report content from whatever stage outputs exist."""
    gpath, tpath, tspath = ws.require("report", "gates.json", "tiers.tsv", "tiers_summary.json")
    inputs = [gpath, tpath, tspath]
    tier_rows = read_tiers(tpath)
    ts = _read_json(tspath)
    conc = {k: ts["concentration"][k] for k in ("gini", "top_shares", "group_shares", "whale_split",
                                                 "strict_non_retail_share")}
    rc = cfg["report"]
    out = {"gates": _read_json(gpath),
           "tiers": {k: ts[k] for k in ("n", "counts", "whale", "whale_by_notional", "whale_by_share",
                                         "cutoffs", "sensitivity")},
           "lorenz": ts["concentration"]["lorenz"],
           "feedback": report.feedback_report(tier_rows, conc, rc["synthetic_notional"], rc["retail_groups"])}
    if "crosstab" in ts:
        out["crosstab"] = ts["crosstab"]
    cpath = ws.path("cluster.json")
    if cpath.exists():
        cs = _read_json(cpath)
        out["cluster"] = {k: cs.get(k) for k in ("stage_reached", "unimodal", "k_star", "silhouettes",
                                                  "cluster_sizes", "centroids", "suggested_epsilon")}
        out["cluster"]["grid"] = [{k: o[k] for k in ("epsilon", "min_pts", "n_clusters", "noise_fraction")}
                                  for o in cs["grid"]["outcomes"]]
        inputs.append(cpath)
    mpath, mmeta = ws.path("metrics.tsv"), ws.path("metrics_meta.json")
    if mpath.exists() and mmeta.exists():
        rows = micropanel.read_metrics(mpath)
        meta = _read_json(mmeta)
        dist = {}
        for m in micropanel.METRIC_NAMES:
            v = np.array([getattr(r, m) for r in rows if getattr(r, m) is not None], dtype=float)
            dist[m] = None if v.size == 0 else {
                "n": int(v.size), "mean": float(v.mean()),
                "quantiles": dict(zip(("p05", "p25", "p50", "p75", "p95"),
                                      map(float, np.quantile(v, [0.05, 0.25, 0.5, 0.75, 0.95]))))}
        out["metrics"] = {"n_markets": meta["n_markets"], "kyle_band": meta["kyle_band"],
                          "kyle_outliers": meta["kyle_outliers"], "ils_in_scope": meta["ils_in_scope"],
                          "sci_canonical": meta["sci_canonical"], "distributions": dist}
        inputs += [mpath, mmeta]
    bpath = ws.path("bilateral.tsv")
    if bpath.exists():
        summ = _read_json(ws.path("bilateral.json"))
        out["bilateral"] = {**summ, "results": _read_bilateral(bpath)}
        inputs.append(bpath)
    dpath = ws.path("detect.json")
    if dpath.exists():
        out["detect"] = _read_json(dpath)
        inputs.append(dpath)
    return out, inputs


def stage_report(ws: Workspace, cfg: dict):
    content, inputs = _assemble(ws, cfg)
    metrics_rows = micropanel.read_metrics(ws.path("metrics.tsv")) if "metrics" in content else None
    metrics_meta = _read_json(ws.path("metrics_meta.json")) if "metrics" in content else None
    figs = _figures(ws, _read_json(ws.path("tiers_summary.json")), content.get("cluster"),
                    metrics_rows, metrics_meta, content.get("bilateral", {}).get("results"))
    md = report.render_markdown(content, [p.name for p in figs])
    mdp = ws.path("report.md")
    mdp.write_text(md)
    jp = _write_json(ws.path("report.json"), content)
    return inputs, [mdp, jp] + figs, {"t3": content["feedback"]["t3_retail_notional"]["ratio_rounded"]}


def stage_bundle(ws: Workspace, cfg: dict):
    content, inputs = _assemble(ws, cfg)
    manifest = _read_json(ws.manifest) if ws.manifest.exists() else {"stages": {}}
    content["manifests"] = {s: {k: v for k, v in rec.items() if k not in ("wall_time_seconds", "notes")}
                            for s, rec in manifest.get("stages", {}).items() if s != "bundle"}
    addresses = set()
    corpus = ws.corpus
    if corpus.exists():
        for r in ingest.read_corpus(corpus):
            addresses.update((r.maker, r.taker))
    private = None
    if not cfg["privacy"]:
        private = {"tiers": read_tiers(ws.path("tiers.tsv"))}
        if ws.path("detect_private.json").exists():
            private["detect"] = _read_json(ws.path("detect_private.json"))
    blob, digest = report.emit_bundle(content, addresses, privacy=bool(cfg["privacy"]), private_tables=private)
    out = ws.path("bundle.json")
    out.write_bytes(blob)
    return inputs, [out], {"sha256": digest, "privacy": bool(cfg["privacy"])}


STAGE_FUNCS: dict[str, Callable] = {
    "ingest": stage_ingest, "gates": stage_gates, "features": stage_features, "cluster": stage_cluster,
    "tiers": stage_tiers, "metrics": stage_metrics, "bilateral": stage_bilateral, "detect": stage_detect,
    "report": stage_report, "bundle": stage_bundle,
}

STAGE_PARAMS = {
    "ingest": lambda c: c["ingest"], "gates": lambda c: c["ingest"].get("contract_addresses"),
    "features": lambda c: c["features"], "cluster": lambda c: c["cluster"], "tiers": lambda c: c["tiers"],
    "metrics": lambda c: {"metrics": c["metrics"], "markets": c["markets"]},
    "bilateral": lambda c: c["bilateral"], "detect": lambda c: {"detect": c["detect"], "privacy": c["privacy"]},
    "report": lambda c: c["report"], "bundle": lambda c: {"report": c["report"], "privacy": c["privacy"]},
}


def run_stage(name: str, cfg: dict) -> StageRecord:
    ws = Workspace(cfg["work_dir"])
    ws.root.mkdir(parents=True, exist_ok=True)
    need = STAGE_REQUIRES.get(name)
    if need and ws.path("gates.json").exists() and need in _load_gates(ws).withdrawn_ids():
        raise GateWithdrawn(f"stage '{name}' withdrawn by validity gates ({need})")
    t0 = time.perf_counter()
    inputs, outputs, notes = STAGE_FUNCS[name](ws, cfg)
    rec = StageRecord(
        inputs=_hash_files(inputs),
        parameter_hash=ingest.parameter_hash({"stage": name, "params": STAGE_PARAMS[name](cfg)}),
        outputs=_hash_files(outputs),
        wall_time_seconds=round(time.perf_counter() - t0, 4),
        notes=notes,
    )
    manifest = _read_json(ws.manifest) if ws.manifest.exists() else {"stages": {}}
    manifest["config"] = cfg
    manifest["stages"][name] = rec.__dict__
    _write_json(ws.manifest, manifest)
    log.info("stage %s done in %.2fs", name, rec.wall_time_seconds)
    return rec


def run_pipeline(cfg: dict, stages=None) -> dict:
    """Run stages in dependency order. Returns {"records": ..., "withdrawn": [...]}."""
    wanted = list(stages or cfg["stages"])
    records, withdrawn = {}, []
    for name in STAGES:
        if name not in wanted:
            continue
        if name == "ingest" and not cfg["ingest"]["source"] and Workspace(cfg["work_dir"]).corpus.exists():
            continue
        try:
            records[name] = run_stage(name, cfg)
        except GateWithdrawn as exc:
            log.warning("%s", exc)
            withdrawn.append(name)
    return {"records": records, "withdrawn": withdrawn}
