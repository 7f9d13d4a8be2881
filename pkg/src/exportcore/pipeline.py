"""End-to-end runs driven by one INI-style config file.

Stages run in dependency order (synth, ingest, metrics, basket, complexity,
frames, estimate). Every emitted file is listed in ``manifest.json`` with its
SHA-256; paths are stored relative to the output directory and nothing
run-specific (timestamps, thread counts) is recorded, so identical inputs
give a byte-identical manifest.
"""
from __future__ import annotations

import configparser
import glob
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from exportcore import complexity as cx
from exportcore import dynamics, frames, ingest, metrics
from exportcore._io import fmt, read_table, sha256_file, write_json, write_table
from exportcore.estimation import ModelSpec, fit, write_fit
from exportcore.synth import SynthConfig, generate, generate_pci, write_pci, write_transactions

log = logging.getLogger(__name__)

STAGES = ("ingest", "metrics", "basket", "complexity", "frames", "estimate")
MODELS = {"firm": "ppml", "country": "ols", "logit": "logit"}


class ValidationError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _years(text: str) -> tuple[int, ...]:
    text = text.strip()
    if "-" in text and "," not in text and " " not in text:
        a, b = text.split("-")
        return tuple(range(int(a), int(b) + 1))
    return tuple(int(y) for y in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


@dataclass
class PipelineConfig:
    out: Path
    years: tuple[int, ...]
    inputs: dict[str, str] = field(default_factory=dict)
    period: str = "annual"
    pci: Path | None = None
    pci_years: tuple[int, ...] | None = None
    quartile_weighting: str = "unweighted"
    quartile_pooling: str = "pooled"
    stages: dict[str, bool] = field(default_factory=lambda: {s: True for s in STAGES})
    schema: dict[str, str] = field(default_factory=dict)
    delimiter: str = ","
    specs: dict[str, ModelSpec] = field(default_factory=dict)
    quartile_splits: bool = True
    include_single: bool = False
    n_bins: int = 20
    synth: SynthConfig | None = None
    threads: int = 1

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "PipelineConfig":
        path = Path(path)
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        if not cp.read(path, encoding="utf-8"):
            raise ValidationError(f"config file not found: {path}")
        base = path.parent
        run = cp["run"] if cp.has_section("run") else {}

        def resolve(p: str) -> str:
            return p if os.path.isabs(p) else str(base / p)

        cfg = cls(out=Path(resolve(run.get("out", "out"))), years=_years(run.get("years", "")))
        cfg.period = run.get("period", "annual")
        cfg.threads = int(run.get("threads", "1"))
        cfg.quartile_splits = _bool(run.get("quartile_splits", "true"))
        cfg.include_single = _bool(run.get("include_single", "false"))
        cfg.n_bins = int(run.get("n_bins", "20"))
        cfg.delimiter = run.get("delimiter", ",")
        if cp.has_section("inputs"):
            cfg.inputs = {k.upper(): resolve(v) for k, v in cp["inputs"].items()}
        if cp.has_section("schema"):
            cfg.schema = dict(cp["schema"])
        if cp.has_section("complexity"):
            sec = cp["complexity"]
            if sec.get("pci"):
                cfg.pci = Path(resolve(sec["pci"]))
            if sec.get("years"):
                cfg.pci_years = _years(sec["years"])
            cfg.quartile_weighting = sec.get("weighting", "unweighted")
            cfg.quartile_pooling = sec.get("pooling", "pooled")
        if cp.has_section("stages"):
            for k, v in cp["stages"].items():
                if k not in STAGES:
                    raise ValidationError(f"unknown stage {k!r}")
                cfg.stages[k] = _bool(v)
        for kind in MODELS:
            if cp.has_section(f"model:{kind}"):
                cfg.specs[kind] = ModelSpec.from_mapping(cp[f"model:{kind}"])
        if cp.has_section("synth"):
            cfg.synth = SynthConfig.from_mapping(dict(cp["synth"]))
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg

    def validate(self) -> None:
        if not self.years:
            raise ValidationError("year range is empty")
        if self.period not in ("annual", "quarterly"):
            raise ValidationError(f"unknown period {self.period!r}")
        if self.quartile_weighting not in ("unweighted", "trade"):
            raise ValidationError(f"unknown quartile weighting {self.quartile_weighting!r}")
        if self.quartile_pooling not in ("pooled", "country"):
            raise ValidationError(f"unknown quartile pooling {self.quartile_pooling!r}")
        if self.synth is None:
            if not self.inputs:
                raise ValidationError("no [inputs] given and no [synth] section")
            for c, pattern in self.inputs.items():
                if not glob.glob(pattern):
                    raise ValidationError(f"input path for {c} does not exist: {pattern}")
        needs_pci = self.stages.get("complexity") or self.stages.get("frames") or self.stages.get("estimate")
        if needs_pci and self.synth is None:
            if self.pci is None:
                raise ValidationError("complexity stage enabled but no PCI file configured")
            if not self.pci.exists():
                raise ValidationError(f"PCI file does not exist: {self.pci}")

    def describe(self) -> dict:
        d = {"years": list(self.years), "period": self.period, "countries": sorted(self.inputs),
             "stages": {k: self.stages[k] for k in STAGES}, "quartile_weighting": self.quartile_weighting,
             "quartile_pooling": self.quartile_pooling, "quartile_splits": self.quartile_splits,
             "include_single": self.include_single, "n_bins": self.n_bins}
        if self.synth is not None:
            d["synth"] = {k: (list(v) if isinstance(v, tuple) else v)
                          for k, v in self.synth.__dict__.items()}
        return d


class _Run:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.out
        self.stages: list[dict] = []
        self.current: dict | None = None
        # in-memory state handed between stages
        self.ts: dict[str, ingest.TransactionSet] = {}
        self.panels: dict[str, ingest.FirmProductPanel] = {}
        self.tpv: dict[str, dict[int, dict[str, dynamics.TpvAssignment]]] = {}
        self.coreness: dict[str, dict[int, metrics.CorenessTable]] = {}
        self.complexity: cx.ComplexityTable | None = None
        self.quartiles: dict[str, dict[str, int | None]] = {}
        self.frames: dict[str, frames.RegressionFrame] = {}

    def artifact(self, path: Path) -> Path:
        self.current["artifacts"].append(path)
        return path

    def table(self, rel: str, header, rows) -> Path:
        return self.artifact(write_table(self.out / rel, header, rows))

    def stage(self, name: str, func: Callable[[], dict | None]) -> None:
        self.current = {"name": name, "status": "running", "artifacts": [], "counts": {}}
        self.stages.append(self.current)
        try:
            counts = func() or {}
        except Exception as exc:
            self.current["status"] = "failed"
            self.current["error"] = f"{type(exc).__name__}: {exc}"
            raise StageError(name, exc) from exc
        self.current["counts"] = counts
        self.current["status"] = "ok"

    # -- stages ---------------------------------------------------------
    def synth(self) -> dict:
        sc = self.cfg.synth
        ts = generate(sc, self.cfg.threads)
        path = self.artifact(write_transactions(ts, self.out / "synth" / f"transactions_{sc.country}.csv"))
        pci = self.artifact(write_pci(generate_pci(sc), self.out / "synth" / "pci.csv"))
        self.cfg.inputs = {sc.country: str(path)}
        self.cfg.pci = pci
        return {"transactions": len(ts)}

    def ingest(self) -> dict:
        counts = {}
        for c in sorted(self.cfg.inputs):
            ts = ingest.read_transactions(self.cfg.inputs[c], self.cfg.schema or None, self.cfg.delimiter, c)
            kept = ingest.filter_re_exports(ts)
            panel = ingest.aggregate_panel(kept, self.cfg.period, self.cfg.threads)
            if self.cfg.period == "quarterly":
                annual = ingest.aggregate_panel(kept, "annual", self.cfg.threads)
            else:
                annual = panel
            self.ts[c], self.panels[c] = kept, annual
            base = f"ingest/{c}"
            self.artifact(ingest.write_panel(panel, self.out / base / "panel.csv"))
            self.table(f"{base}/rejects.csv", ("source", "line", "reason"),
                       ((os.path.basename(r.source), r.line, r.reason) for r in ts.rejects))
            self.table(f"{base}/quarterly.csv", ("year", "quarter", "total_usd", "exporters", "firm_products"),
                       ((q.year, q.quarter, q.total_cents / 100, q.exporters, q.firm_products)
                        for q in ingest.quarterly_aggregates(kept)))
            self.tpv[c] = {}
            for y in self.cfg.years:
                if y not in annual:
                    raise ValueError(f"{c}: no data for year {y}")
                summaries = ingest.firm_summaries(annual, y)
                self.table(f"{base}/firms_{y}.csv",
                           ("firm_id", "year", "total_usd", "log_size", "np", "nd", "size_quartile",
                            "diversification_bin"),
                           ((s.firm_id, y, s.total_exports, s.log_size, s.np, s.nd, s.size_quartile,
                             s.diversification_bin) for s in summaries))
                self.table(f"{base}/diversification_{y}.csv",
                           ("level", "n_firms", "firm_share", "export_share", "mean_destinations",
                            "median_total_usd"),
                           ((r.level, r.n_firms, r.firm_share, r.export_share, r.mean_destinations,
                             r.median_total_exports) for r in ingest.diversification_table(annual, y)))
                self.table(f"{base}/size_quartiles_{y}.csv",
                           ("quartile", "total_usd", "n_firms", "mean_usd", "mean_np", "mean_nd"),
                           ((r.quartile, r.total_exports, r.n_firms, r.mean_exports, r.mean_np, r.mean_nd)
                            for r in ingest.size_quartile_table(summaries)))
                tpv = dynamics.typical_product_vectors(kept, y)
                self.tpv[c][y] = tpv
                self.table(f"{base}/tpv_{y}.csv", TPV_HEADER, tpv_rows(tpv))
            counts[c] = {"records": len(ts), "rejects": len(ts.rejects),
                         "re_exports_removed": kept.removed_re_exports, "panel_entries": len(panel)}
        return counts

    def metrics(self) -> dict:
        counts = {}
        for c, panel in sorted(self.panels.items()):
            self.coreness[c] = {}
            for y in self.cfg.years:
                y_mat = metrics.binarize(metrics.compute_rca(panel, y))
                net = metrics.jaccard_network(y_mat, c, y, self.cfg.threads)
                table = metrics.coreness(panel, net, y, self.cfg.threads)
                self.coreness[c][y] = table
                self.artifact(metrics.write_network(net, self.out / f"metrics/{c}/network_{y}.csv"))
                self.artifact(metrics.write_coreness(table, self.out / f"metrics/{c}/coreness_{y}.csv"))
                counts[f"{c}:{y}"] = {"specialized_pairs": len(y_mat), "nodes": len(net.products),
                                      "edges": len(net.edges), "coreness_rows": len(table),
                                      "products_outside_network": len(table.missing_products)}
        return counts

    def basket(self) -> dict:
        counts = {}
        edges = [i / 20 for i in range(21)]
        for c, panel in sorted(self.panels.items()):
            base = f"basket/{c}"
            for t in self.cfg.years[1:]:
                recs = dynamics.bray_curtis_all(panel, t)
                self.table(f"{base}/bray_curtis_{t}.csv", ("firm_id", "year_from", "year_to", "bray_curtis", "exited"),
                           ((r.firm_id, r.year_from, r.year_to, r.bray_curtis, r.exited) for r in recs))
                self.table(f"{base}/bray_curtis_hist_{t}.csv", ("lo", "hi", "count"),
                           dynamics.histogram([r.bray_curtis for r in recs], edges))
            for t in self.cfg.years[:-1]:
                flags = dynamics.kept_dropped(panel, t)
                core = self.coreness.get(c, {}).get(t)
                lookup = core.lookup() if core else {}
                self.table(f"{base}/kept_dropped_{t}.csv", ("firm_id", "hs6", "year", "status", "coreness"),
                           ((f, k, t, s, lookup.get((f, k))) for (f, k), s in sorted(flags.items())))
                for status in ("kept", "dropped"):
                    self.table(f"{base}/coreness_hist_{t}_{status}.csv", ("lo", "hi", "count"),
                               dynamics.histogram([lookup[key] for key, s in flags.items()
                                                   if s == status and key in lookup], edges))
            for y in self.cfg.years:
                res = dynamics.binned_exponential_fit(ingest.firm_summaries(panel, y), self.cfg.n_bins)
                self.table(f"{base}/binned_fit_{y}.csv", ("bin", "n_firms", "mean_log_size", "mean_np", "a", "b"),
                           ((i + 1, bs.n_firms, bs.mean_log_size, bs.mean_np, res.a, res.b)
                            for i, bs in enumerate(res.bins)))
                counts[f"{c}:{y}"] = {"fit_a": fmt(res.a), "fit_b": fmt(res.b)}
        return counts

    def complexity_stage(self) -> dict:
        table = cx.load_pci(self.cfg.pci, self.cfg.pci_years)
        self.complexity = table
        groups = {"ALL": sorted(self.panels)} if self.cfg.quartile_pooling == "pooled" else {
            c: [c] for c in sorted(self.panels)}
        lag_years = [t - 1 for t in self.cfg.years[1:]]
        for g, cs in groups.items():
            universe: set[str] = set()
            weights: dict[str, float] = {}
            for c in cs:
                for t in lag_years:
                    for k, m in self.panels[c].product_marginals(t).items():
                        universe.add(k)
                        weights[k] = weights.get(k, 0.0) + m.total_cents
            w = weights if self.cfg.quartile_weighting == "trade" else None
            self.quartiles[g] = cx.quartile_assign(table, universe, w)
            self.artifact(cx.write_complexity(table, self.quartiles[g], self.out / f"complexity/complexity_{g}.csv"))
        return {"products": len(table), "missing": len(table.missing)}

    def frames_stage(self) -> dict:
        years = self.cfg.years[1:]
        built: dict[str, list[frames.RegressionFrame]] = {k: [] for k in MODELS}
        for c, panel in sorted(self.panels.items()):
            args = (panel, self.coreness[c], self.tpv[c], self.complexity, years)
            built["firm"].append(frames.build_firm_panel(*args, include_single=self.cfg.include_single))
            built["country"].append(frames.build_country_panel(*args))
            built["logit"].append(frames.build_logit_frame(*args))
        counts = {}
        for kind, fs in built.items():
            fr = frames.pool_frames(fs)
            self.frames[kind] = fr
            self.artifact(frames.write_frame(fr, self.out / f"frames/{kind}.csv"))
            self.current["artifacts"].append(Path(str(self.out / f"frames/{kind}.csv") + ".meta"))
            counts[kind] = {"rows": fr.n, **{f"dropped.{k}": v for k, v in fr.drops.items()}}
        return counts

    def estimate(self) -> dict:
        counts = {}
        for kind, model in MODELS.items():
            fr = self.frames[kind]
            spec = self.cfg.specs.get(kind) or fr.default_spec()
            subsets = {"all": fr}
            if self.cfg.quartile_splits:
                by_country = self.cfg.quartile_pooling == "country"
                for i, sub in frames.split_by_quartile(fr, self.quartiles, by_country).items():
                    subsets[f"q{i}"] = sub
            for name, sub in subsets.items():
                res = fit(sub, spec, model)
                self.artifact(write_fit(res, self.out / f"estimates/{kind}_{name}.csv"))
                counts[f"{kind}:{name}"] = {"nobs": res.nobs}
        return counts


TPV_HEADER = ("firm_id", "year", "n_destinations", "tpv")


def tpv_rows(tpv: Mapping[str, dynamics.TpvAssignment]):
    for f, a in sorted(tpv.items()):
        yield f, a.year, a.n_destinations, ";".join(sorted(a.tpv)) if a.tpv else ""


def read_tpv(path: str | Path) -> dict[int, dict[str, dynamics.TpvAssignment]]:
    out: dict[int, dict[str, dynamics.TpvAssignment]] = {}
    for r in read_table(path):
        y = int(r["year"])
        s = frozenset(r["tpv"].split(";")) if r["tpv"] else None
        out.setdefault(y, {})[r["firm_id"]] = dynamics.TpvAssignment(r["firm_id"], y, s, int(r["n_destinations"]))
    return out


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every enabled stage and write ``manifest.json`` into ``cfg.out``.

    On a stage failure the manifest is still written, with status ``failed``,
    the failing stage named and the artifacts of earlier stages kept.
    """
    cfg.validate()
    cfg.out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg)
    plan: list[tuple[str, Callable]] = []
    if cfg.synth is not None:
        plan.append(("synth", run.synth))
    funcs = {"ingest": run.ingest, "metrics": run.metrics, "basket": run.basket,
             "complexity": run.complexity_stage, "frames": run.frames_stage, "estimate": run.estimate}
    needs = {"metrics": "ingest", "basket": "ingest", "complexity": "ingest", "frames": "complexity",
             "estimate": "frames"}
    for name in STAGES:
        if cfg.stages.get(name):
            dep = needs.get(name)
            if dep and not cfg.stages.get(dep):
                raise ValidationError(f"stage {name!r} needs stage {dep!r}")
            plan.append((name, funcs[name]))
    if cfg.stages.get("frames") and not cfg.stages.get("metrics"):
        raise ValidationError("stage 'frames' needs stage 'metrics'")
    manifest = {"config": cfg.describe(), "status": "ok"}
    try:
        for name, func in plan:
            log.info("stage %s", name)
            run.stage(name, func)
    except StageError as exc:
        manifest["status"] = "failed"
        manifest["failed_stage"] = exc.stage
        manifest["error"] = str(exc.cause)
        raise_after = exc
    else:
        raise_after = None
    manifest["stages"] = [
        {"name": s["name"], "status": s["status"], "counts": s["counts"],
         **({"error": s["error"]} if "error" in s else {}),
         "artifacts": [{"path": p.relative_to(cfg.out).as_posix(), "sha256": sha256_file(p),
                        "bytes": p.stat().st_size} for p in s["artifacts"] if p.exists()]}
        for s in run.stages]
    write_json(cfg.out / "manifest.json", manifest)
    if raise_after is not None:
        raise raise_after
    return manifest
