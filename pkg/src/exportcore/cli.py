"""Command line entry point: ``exportcore <subcommand> ...``.

Exit code 0 on success. On failure a JSON error block is printed to stderr
and the exit code is 1 (2 for usage errors, as argparse does).
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import traceback
from pathlib import Path

from exportcore import complexity as cx
from exportcore import dynamics, frames, ingest, metrics, pipeline
from exportcore._io import read_table, sha256_file, write_json, write_table
from exportcore.estimation import ModelSpec, fit, write_fit
from exportcore.synth import SynthConfig, generate, generate_pci, write_pci, write_transactions


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _read_ini(path: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    if path and not cp.read(path, encoding="utf-8"):
        raise pipeline.ValidationError(f"config file not found: {path}")
    return cp


def cmd_ingest(args) -> dict:
    cp = _read_ini(args.config)
    sec = cp["ingest"] if cp.has_section("ingest") else {}
    schema = dict(cp["schema"]) if cp.has_section("schema") else None
    country = args.country or sec.get("country", "")
    period = args.period or sec.get("period", "annual")
    delimiter = args.delimiter or sec.get("delimiter", ",")
    out = Path(args.out)
    ts = ingest.read_transactions(args.input, schema, delimiter, country)
    kept = ingest.filter_re_exports(ts)
    panel = ingest.aggregate_panel(kept, period, args.threads)
    written = [ingest.write_panel(panel, out / "panel.csv")]
    written.append(write_table(out / "rejects.csv", ("source", "line", "reason"),
                               ((r.source, r.line, r.reason) for r in ts.rejects)))
    written.append(write_table(out / "quarterly.csv", ("year", "quarter", "total_usd", "exporters", "firm_products"),
                               ((q.year, q.quarter, q.total_cents / 100, q.exporters, q.firm_products)
                                for q in ingest.quarterly_aggregates(kept))))
    annual = panel if period == "annual" else ingest.aggregate_panel(kept, "annual", args.threads)
    for y in annual.periods:
        written.append(write_table(out / f"tpv_{y}.csv", pipeline.TPV_HEADER,
                                   pipeline.tpv_rows(dynamics.typical_product_vectors(kept, y))))
        written.append(write_table(
            out / f"diversification_{y}.csv",
            ("level", "n_firms", "firm_share", "export_share", "mean_destinations", "median_total_usd"),
            ((r.level, r.n_firms, r.firm_share, r.export_share, r.mean_destinations, r.median_total_exports)
             for r in ingest.diversification_table(annual, y))))
    manifest = {"records": len(ts), "rejects": len(ts.rejects), "re_exports_removed": kept.removed_re_exports,
                "panel_entries": len(panel),
                "files": {p.name: sha256_file(p) for p in written}}
    write_json(out / "manifest.json", manifest)
    return manifest


def cmd_proximity(args) -> dict:
    panel = ingest.read_panel(args.panel)
    y = metrics.binarize(metrics.compute_rca(panel, args.year))
    net = metrics.jaccard_network(y, args.country or panel.country, args.year, args.threads)
    metrics.write_network(net, args.out)
    return {"nodes": len(net.products), "edges": len(net.edges)}


def cmd_coreness(args) -> dict:
    panel = ingest.read_panel(args.panel)
    net = metrics.read_network(args.network, panel.country, args.year)
    table = metrics.coreness(panel, net, args.year, args.threads)
    metrics.write_coreness(table, args.out)
    return {"rows": len(table), "products_outside_network": list(table.missing_products)}


def cmd_basket(args) -> dict:
    panel = ingest.read_panel(args.panel)
    t0, t1 = _ints(args.years)
    out = Path(args.out)
    if t1 != t0 + 1:
        raise ValueError("--years must be two consecutive years t0,t1")
    recs = dynamics.bray_curtis_all(panel, t1)
    edges = [i / 20 for i in range(21)]
    write_table(out / "bray_curtis.csv", ("firm_id", "year_from", "year_to", "bray_curtis", "exited"),
                ((r.firm_id, r.year_from, r.year_to, r.bray_curtis, r.exited) for r in recs))
    write_table(out / "bray_curtis_hist.csv", ("lo", "hi", "count"),
                dynamics.histogram([r.bray_curtis for r in recs], edges))
    flags = dynamics.kept_dropped(panel, t0)
    write_table(out / "kept_dropped.csv", ("firm_id", "hs6", "year", "status"),
                ((f, k, t0, s) for (f, k), s in sorted(flags.items())))
    fit_res = dynamics.binned_exponential_fit(ingest.firm_summaries(panel, t0), args.n_bins)
    write_table(out / "binned_fit.csv", ("bin", "n_firms", "mean_log_size", "mean_np", "a", "b"),
                ((i + 1, b.n_firms, b.mean_log_size, b.mean_np, fit_res.a, fit_res.b)
                 for i, b in enumerate(fit_res.bins)))
    if args.transactions:
        ts = ingest.filter_re_exports(ingest.read_transactions(args.transactions))
        for y in (t0, t1):
            write_table(out / f"tpv_{y}.csv", pipeline.TPV_HEADER,
                        pipeline.tpv_rows(dynamics.typical_product_vectors(ts, y)))
    return {"firms": len(recs), "fit_a": fit_res.a, "fit_b": fit_res.b}


def cmd_complexity(args) -> dict:
    table = cx.load_pci(args.pci, _ints(args.years) if args.years else None)
    if args.panel:
        panel = ingest.read_panel(args.panel)
        universe = panel.all_products()
    else:
        universe = list(table.values)
    q = cx.quartile_assign(table, universe)
    cx.write_complexity(table, q, args.out)
    return {"products": len(table), "missing": list(table.missing)}


def _read_complexity_out(path: str) -> cx.ComplexityTable:
    vals = {r["product"]: float(r["pci_mean"]) for r in read_table(path) if r["pci_mean"]}
    return cx.ComplexityTable(vals)


def cmd_frames(args) -> dict:
    panel = ingest.read_panel(args.panel)
    years = _ints(args.years)
    cdir = Path(args.coreness_dir)
    core = {}
    for t in years:
        core[t - 1] = metrics.read_coreness(cdir / f"coreness_{t - 1}.csv")
    tpv = {}
    for path in args.tpv:
        tpv.update(pipeline.read_tpv(path))
    table = _read_complexity_out(args.complexity) if args.complexity_table else cx.load_pci(args.complexity)
    if args.kind == "firm":
        fr = frames.build_firm_panel(panel, core, tpv, table, years, include_single=args.include_single)
    elif args.kind == "country":
        fr = frames.build_country_panel(panel, core, tpv, table, years)
    else:
        fr = frames.build_logit_frame(panel, core, tpv, table, years)
    frames.write_frame(fr, args.out)
    return {"rows": fr.n, "dropped": fr.drops}


def cmd_estimate(args) -> dict:
    fr = frames.read_frame(args.frame)
    spec = ModelSpec.from_file(args.spec) if args.spec else fr.default_spec()
    res = fit(fr, spec, args.model)
    write_fit(res, args.out)
    return {"nobs": res.nobs, "coefficients": dict(zip(res.names, res.params.tolist()))}


def cmd_synth(args) -> dict:
    cfg = SynthConfig.from_file(args.config) if args.config else SynthConfig()
    ts = generate(cfg, args.threads)
    write_transactions(ts, args.out)
    if args.pci_out:
        write_pci(generate_pci(cfg), args.pci_out)
    return {"transactions": len(ts)}


def cmd_run(args) -> dict:
    cfg = pipeline.PipelineConfig.from_file(args.config, out=Path(args.out) if args.out else None)
    if args.threads_given:
        cfg.threads = args.threads
    manifest = pipeline.run_pipeline(cfg)
    return {"status": manifest["status"], "stages": [s["name"] for s in manifest["stages"]]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exportcore", description="Firm-product export specialization analytics")
    p.add_argument("--threads", type=int, default=None, help="worker threads for sharded stages")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="parse transactions into a firm-product panel")
    s.add_argument("--input", required=True, help="glob of delimited transaction files")
    s.add_argument("--config", help="INI file with [ingest] and [schema] sections")
    s.add_argument("--out", required=True)
    s.add_argument("--country")
    s.add_argument("--period", choices=("annual", "quarterly"))
    s.add_argument("--delimiter")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("proximity", help="Jaccard product network for one year")
    s.add_argument("--panel", required=True)
    s.add_argument("--year", type=int, required=True)
    s.add_argument("--country", default="")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_proximity)

    s = sub.add_parser("coreness", help="coreness of every firm-product in one year")
    s.add_argument("--panel", required=True)
    s.add_argument("--network", required=True)
    s.add_argument("--year", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_coreness)

    s = sub.add_parser("basket", help="Bray-Curtis, kept/dropped, TPV and binned size fit")
    s.add_argument("--panel", required=True)
    s.add_argument("--years", required=True, help="t0,t1")
    s.add_argument("--out", required=True)
    s.add_argument("--transactions", help="transaction glob, needed for TPV output")
    s.add_argument("--n-bins", type=int, default=20)
    s.set_defaults(func=cmd_basket)

    s = sub.add_parser("complexity", help="average PCI and assign quartiles")
    s.add_argument("--pci", required=True)
    s.add_argument("--years")
    s.add_argument("--panel", help="panel whose products form the quartile universe")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_complexity)

    s = sub.add_parser("frames", help="build a regression frame")
    s.add_argument("--kind", choices=("firm", "country", "logit"), required=True)
    s.add_argument("--panel", required=True)
    s.add_argument("--coreness-dir", required=True, help="directory with coreness_<year>.csv files")
    s.add_argument("--tpv", nargs="+", required=True)
    s.add_argument("--complexity", required=True, help="raw PCI file, or complexity output with --complexity-table")
    s.add_argument("--complexity-table", action="store_true")
    s.add_argument("--years", required=True, help="outcome years, e.g. 2019,2020")
    s.add_argument("--include-single", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_frames)

    s = sub.add_parser("estimate", help="fit ppml, logit or ols on a frame")
    s.add_argument("--frame", required=True)
    s.add_argument("--model", choices=("ppml", "logit", "ols"), required=True)
    s.add_argument("--spec", help="INI file with a [model] section")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("synth", help="generate synthetic transactions")
    s.add_argument("--config", help="INI file with a [synth] section")
    s.add_argument("--out", required=True)
    s.add_argument("--pci-out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("run", help="run the full pipeline from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override [run] out")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.threads_given = args.threads is not None
    if args.threads is None:
        args.threads = 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except Exception as exc:
        block = {"error": {"command": args.command, "type": type(exc).__name__, "message": str(exc)}}
        if isinstance(exc, pipeline.StageError):
            block["error"]["stage"] = exc.stage
        if args.verbose:
            block["error"]["traceback"] = traceback.format_exc()
        print(json.dumps(block, indent=2), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
