"""Command-line entry point.

Exit codes: 0 ok, 2 an analysis was withdrawn by the validity gates
(informational), 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__, pipeline, synth
from .ingest import IngestError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_WITHDRAWN = 2


def _csv_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _csv_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _csv(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fillscope", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--work", help="work directory holding stage outputs")
    common.add_argument("--markets", help="market metadata JSON (p_open, p_res, t_res, group, book)")
    common.add_argument("--private", action="store_true", help="allow address-level tables in outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="build the fill corpus")
    s.add_argument("--source", help="corpus:<tsv>, logs:<jsonl> or rpc (endpoints in $FILLSCOPE_RPC_URLS)")
    s.add_argument("--block-times", help="whitespace-separated 'block timestamp' table")
    s.add_argument("--from-block", type=int)
    s.add_argument("--to-block", type=int)
    s.add_argument("--chunk-size", type=int)
    s.add_argument("--retries", type=int)
    s.add_argument("--max-in-flight", type=int)
    s.add_argument("--keep-venue", action="store_true", help="do not drop venue-contract fills")

    sub.add_parser("gates", parents=[common], help="evaluate validity gates from the corpus header")

    s = sub.add_parser("features", parents=[common], help="per-address aggregates and scaled features")
    s.add_argument("--min-fills", type=int)
    s.add_argument("--scaler", choices=["winsor_z", "robust"])
    s.add_argument("--hhi-weight", choices=["count", "notional"])

    s = sub.add_parser("cluster", parents=[common], help="DBSCAN grid, rejection rules, k-means fallback")
    s.add_argument("--eps", type=_csv_floats, help="comma-separated epsilon grid")
    s.add_argument("--min-pts", type=_csv_ints)
    s.add_argument("--k-range", type=_csv_ints)
    s.add_argument("--seed", type=int)
    s.add_argument("--hdbscan-labels", help="JSON address->label map from an external HDBSCAN run")

    s = sub.add_parser("tiers", parents=[common], help="feature-tier stratification")
    s.add_argument("--whale-notional", type=float)
    s.add_argument("--whale-share", type=float, help="single-market share rule; negative disables it")

    s = sub.add_parser("metrics", parents=[common], help="per-market metric panel")
    s.add_argument("--anchors", type=_csv, help="four ILS anchors, e.g. 1h,6h,24h,72h")
    s.add_argument("--no-hawkes", action="store_true")

    s = sub.add_parser("bilateral", parents=[common], help="share x metric Spearman tests")
    s.add_argument("--alpha", type=float)
    s.add_argument("--boot", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--group-by", choices=["tier", "cluster"])

    s = sub.add_parser("detect", parents=[common], help="candidate pattern scans")
    s.add_argument("--wash", action="store_true")
    s.add_argument("--negrisk", action="store_true")
    s.add_argument("--swings", action="store_true")
    s.add_argument("--gross-min", type=float)
    s.add_argument("--net-ratio-max", type=float)
    s.add_argument("--delta-wash", type=float)
    s.add_argument("--delta-arb", type=float)

    s = sub.add_parser("report", parents=[common], help="feedback report, markdown + JSON + figures")
    s.add_argument("--synthetic-notional", type=float)

    sub.add_parser("bundle", parents=[common], help="aggregate-only public bundle")

    s = sub.add_parser("run", parents=[common], help="run the pipeline end to end")
    s.add_argument("--source")
    s.add_argument("--stages", type=_csv)

    s = sub.add_parser("synth", help="generate a synthetic corpus with ground truth")
    s.add_argument("--spec", help="SynthSpec JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--small", action="store_true", help="about 10k fills")
    s.add_argument("--out", required=True, help="output directory")
    return p


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    if getattr(args, "work", None):
        o["work_dir"] = args.work
    if getattr(args, "markets", None):
        o["markets"] = args.markets
    if getattr(args, "private", False):
        o["privacy"] = False
    cmd = args.command
    if cmd in ("ingest", "run"):
        put("ingest", "source", args.source)
    if cmd == "ingest":
        put("ingest", "block_times", args.block_times)
        put("ingest", "from_block", args.from_block)
        put("ingest", "to_block", args.to_block)
        put("ingest", "chunk_size", args.chunk_size)
        put("ingest", "retries", args.retries)
        put("ingest", "max_in_flight", args.max_in_flight)
        if args.keep_venue:
            put("ingest", "exclude_venue", "")
    elif cmd == "features":
        put("features", "min_fills", args.min_fills)
        put("features", "scaler", args.scaler)
        put("features", "hhi_weight", args.hhi_weight)
    elif cmd == "cluster":
        put("cluster", "eps", args.eps)
        put("cluster", "min_pts", args.min_pts)
        put("cluster", "k_range", args.k_range)
        put("cluster", "seed", args.seed)
        put("cluster", "hdbscan_labels", args.hdbscan_labels)
    elif cmd == "tiers":
        put("tiers", "whale_notional", args.whale_notional)
        if args.whale_share is not None:
            o.setdefault("tiers", {})["whale_single_market_share"] = (
                None if args.whale_share < 0 else args.whale_share)
    elif cmd == "metrics":
        put("metrics", "anchors", args.anchors)
        if args.no_hawkes:
            put("metrics", "hawkes", False)
    elif cmd == "bilateral":
        put("bilateral", "alpha", args.alpha)
        put("bilateral", "boot", args.boot)
        put("bilateral", "seed", args.seed)
        put("bilateral", "group_by", args.group_by)
    elif cmd == "detect":
        if args.wash or args.negrisk or args.swings:
            put("detect", "wash", args.wash)
            put("detect", "negrisk", args.negrisk)
            put("detect", "swings", args.swings)
        put("detect", "gross_min", args.gross_min)
        put("detect", "net_ratio_max", args.net_ratio_max)
        put("detect", "delta_wash", args.delta_wash)
        put("detect", "delta_arb", args.delta_arb)
    elif cmd == "report":
        put("report", "synthetic_notional", args.synthetic_notional)
    elif cmd == "run" and args.stages:
        o["stages"] = args.stages
    return o


def _synth(args) -> int:
    spec = synth.small_spec() if args.small else synth.SynthSpec()
    if args.spec:
        with open(args.spec) as fh:
            spec = synth.SynthSpec.from_dict(json.load(fh))
    if args.seed is not None:
        spec.seed = args.seed
    corpus = synth.generate(spec)
    info = synth.write_synth(corpus, args.out, spec)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return _synth(args)
        cfg = pipeline.load_config(args.config, _overrides(args))
        if args.command == "run":
            out = pipeline.run_pipeline(cfg)
            for name, rec in out["records"].items():
                print(f"{name}\t{json.dumps(rec.notes, sort_keys=True, default=str)}")
            for name in out["withdrawn"]:
                print(f"{name}\twithdrawn by validity gates")
            return EXIT_WITHDRAWN if out["withdrawn"] else EXIT_OK
        rec = pipeline.run_stage(args.command, cfg)
        print(json.dumps(rec.notes, sort_keys=True, default=str))
        if args.command == "gates" and rec.notes.get("withdrawn"):
            return EXIT_WITHDRAWN
        return EXIT_OK
    except pipeline.GateWithdrawn as exc:
        print(f"withdrawn: {exc}", file=sys.stderr)
        return EXIT_WITHDRAWN
    except (pipeline.StageError, IngestError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
