"""Regression frames for the firm-product PPML model, the country-product
linear model and the extensive-margin logit.

Every frame row is keyed by label columns (country, firm_id, hs6, year) and
carries float covariates plus string fixed-effect group labels. Rows that
cannot be built are counted in ``drops`` by reason.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from exportcore._io import read_table, write_table
from exportcore.complexity import ComplexityTable
from exportcore.dynamics import TpvAssignment
from exportcore.ingest import FirmProductPanel
from exportcore.metrics import CorenessTable

COVID_YEAR = 2020


@dataclass
class RegressionFrame:
    kind: str
    labels: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    outcome: str
    drops: dict[str, int] = field(default_factory=dict)
    pooled: bool = False

    @property
    def n(self) -> int:
        return len(self.numeric[self.outcome])

    def __len__(self) -> int:
        return self.n

    def take(self, mask: np.ndarray) -> "RegressionFrame":
        return RegressionFrame(self.kind, {k: v[mask] for k, v in self.labels.items()},
                               {k: v[mask] for k, v in self.numeric.items()},
                               self.outcome, dict(self.drops), self.pooled)

    def keys(self) -> list[tuple[str, ...]]:
        cols = [c for c in ("country", "firm_id", "hs6", "year") if c in self.labels]
        return list(zip(*(self.labels[c].tolist() for c in cols)))

    def default_spec(self):
        from exportcore.estimation import ModelSpec
        spec = DEFAULT_SPECS[self.kind]
        fe = list(spec["fixed_effects"])
        if self.pooled:
            fe.append("country")
        cov = [c for c in spec["covariates"] if c in self.numeric]
        return ModelSpec(spec["outcome"], cov, [], fe)


DEFAULT_SPECS = {
    "firm": {"outcome": "y",
             "covariates": ["ln_y_lag", "coreness_lag", "coreness_x_c20", "complexity", "tpv_lag",
                            "ln_nd_lag", "ln_np_lag", "single_product"],
             "fixed_effects": ["year", "firm_hs2"]},
    "country": {"outcome": "ln_y",
                "covariates": ["ln_y_lag", "coreness_lag", "coreness_x_c20", "complexity", "tpv_share_lag",
                               "ln_nd_lag", "ln_np_lag", "single_share_lag"],
                "fixed_effects": ["year", "country_hs2"]},
    "logit": {"outcome": "exported",
              "covariates": ["ln_y_firm_lag", "coreness_lag", "coreness_x_c20", "complexity", "tpv_lag",
                             "single_product"],
              "fixed_effects": ["hs2_year"]},
}


class _Builder:
    def __init__(self, label_cols: Sequence[str], num_cols: Sequence[str]):
        self.labels = {c: [] for c in label_cols}
        self.numeric = {c: [] for c in num_cols}
        self.drops: Counter = Counter()

    def add(self, labels: Mapping[str, str], numeric: Mapping[str, float]) -> None:
        for c, v in labels.items():
            self.labels[c].append(str(v))
        for c, v in numeric.items():
            self.numeric[c].append(float(v))

    def frame(self, kind: str, outcome: str) -> RegressionFrame:
        return RegressionFrame(kind, {c: np.array(v, dtype=object) for c, v in self.labels.items()},
                               {c: np.array(v, dtype=float) for c, v in self.numeric.items()},
                               outcome, dict(sorted(self.drops.items())))


def _tpv_member(tpv: Mapping[int, Mapping[str, TpvAssignment]], firm: str, product: str, year: int) -> bool:
    a = tpv.get(year, {}).get(firm)
    return bool(a and a.tpv and product in a.tpv)


def _lag_years(panel: FirmProductPanel, years: Iterable[int]) -> list[int]:
    years = sorted(set(years))
    for t in years:
        panel.require(t - 1)
        panel.require(t)
    return years


def build_firm_panel(panel: FirmProductPanel, coreness: Mapping[int, CorenessTable],
                     tpv: Mapping[int, Mapping[str, TpvAssignment]], complexity: ComplexityTable,
                     years: Iterable[int], include_single: bool = False) -> RegressionFrame:
    """Frame for the firm-product PPML model.

    Sample: every (firm, product) with positive exports in t-1; the outcome
    is the t value in USD, zero when the pair exited. Single-product firms are
    left out unless ``include_single``, in which case a dummy flags them.
    """
    b = _Builder(("country", "firm_id", "hs6", "year", "hs2", "firm_hs2"),
                 ("y", "ln_y_lag", "coreness_lag", "coreness_x_c20", "complexity", "tpv_lag",
                  "ln_nd_lag", "ln_np_lag", "single_product", "c20"))
    cc = panel.country
    for t in _lag_years(panel, years):
        core = coreness[t - 1].lookup() if (t - 1) in coreness else {}
        c20 = 1.0 if t == COVID_YEAR else 0.0
        for firm in panel.firms(t - 1):
            fm = panel.firm_marginal(firm, t - 1)
            single = fm.np == 1
            if single and not include_single:
                b.drops["single_product_firm"] += fm.np
                continue
            if fm.nd < 1:
                raise ValueError(f"firm {firm!r} has no destination count in {t - 1}")
            for k, x in panel.basket(firm, t - 1).items():
                if k not in complexity:
                    b.drops["missing_complexity"] += 1
                    continue
                c = core.get((firm, k))
                if c is None:
                    b.drops["missing_coreness"] += 1
                    continue
                hs2 = k[:2]
                b.add({"country": cc, "firm_id": firm, "hs6": k, "year": t, "hs2": hs2,
                       "firm_hs2": f"{cc}:{firm}:{hs2}"},
                      {"y": panel.value(firm, k, t) / 100, "ln_y_lag": math.log(x / 100),
                       "coreness_lag": c, "coreness_x_c20": c * c20, "complexity": complexity[k],
                       "tpv_lag": float(_tpv_member(tpv, firm, k, t - 1)),
                       "ln_nd_lag": math.log(fm.nd), "ln_np_lag": math.log(fm.np),
                       "single_product": float(single), "c20": c20})
    frame = b.frame("firm", "y")
    if not include_single:
        del frame.numeric["single_product"]
    return frame


def build_country_panel(panel: FirmProductPanel, coreness: Mapping[int, CorenessTable],
                        tpv: Mapping[int, Mapping[str, TpvAssignment]], complexity: ComplexityTable,
                        years: Iterable[int]) -> RegressionFrame:
    """Frame for the country-product linear model.

    Covariates are export-weighted means over the firms exporting the product
    in t-1. Mean coreness uses multi-product firms only; the product's
    single-product share and TPV share are value shares.
    """
    b = _Builder(("country", "hs6", "year", "hs2", "country_hs2"),
                 ("ln_y", "ln_y_lag", "coreness_lag", "coreness_x_c20", "complexity", "tpv_share_lag",
                  "ln_nd_lag", "ln_np_lag", "single_share_lag", "c20"))
    cc = panel.country
    for t in _lag_years(panel, years):
        core = coreness[t - 1].lookup() if (t - 1) in coreness else {}
        c20 = 1.0 if t == COVID_YEAR else 0.0
        exporters: dict[str, list[tuple[str, int]]] = {}
        for firm in panel.firms(t - 1):
            for k, x in panel.basket(firm, t - 1).items():
                exporters.setdefault(k, []).append((firm, x))
        now = panel.product_marginals(t)
        for k in sorted(exporters):
            flows = exporters[k]
            total = sum(x for _, x in flows)
            if k not in now:
                b.drops["no_exports_in_t"] += 1
                continue
            if k not in complexity:
                b.drops["missing_complexity"] += 1
                continue
            multi = [(f, x) for f, x in flows if panel.firm_marginal(f, t - 1).np > 1]
            if not multi:
                b.drops["single_product_exporters_only"] += 1
                continue
            if any((f, k) not in core for f, _ in multi):
                b.drops["missing_coreness"] += 1
                continue
            mx = sum(x for _, x in multi)
            mean_core = sum(core[(f, k)] * x for f, x in multi) / mx
            single_share = sum(x for f, x in flows if panel.firm_marginal(f, t - 1).np == 1) / total
            tpv_share = sum(x for f, x in flows if _tpv_member(tpv, f, k, t - 1)) / total
            mean_nd = sum(panel.firm_marginal(f, t - 1).nd * x for f, x in flows) / total
            mean_np = sum(panel.firm_marginal(f, t - 1).np * x for f, x in flows) / total
            hs2 = k[:2]
            b.add({"country": cc, "hs6": k, "year": t, "hs2": hs2, "country_hs2": f"{cc}:{hs2}"},
                  {"ln_y": math.log(now[k].total_cents / 100), "ln_y_lag": math.log(total / 100),
                   "coreness_lag": mean_core, "coreness_x_c20": mean_core * c20,
                   "complexity": complexity[k], "tpv_share_lag": tpv_share,
                   "ln_nd_lag": math.log(mean_nd), "ln_np_lag": math.log(mean_np),
                   "single_share_lag": single_share, "c20": c20})
    return b.frame("country", "ln_y")


def build_logit_frame(panel: FirmProductPanel, coreness: Mapping[int, CorenessTable],
                      tpv: Mapping[int, Mapping[str, TpvAssignment]], complexity: ComplexityTable,
                      years: Iterable[int]) -> RegressionFrame:
    """Frame for the probability that a lagged-positive firm-product is still exported.

    Lagged exports enter at the firm level (total firm exports in t-1).
    Single-product firms stay in the sample and are flagged by a dummy.
    """
    b = _Builder(("country", "firm_id", "hs6", "year", "hs2", "hs2_year"),
                 ("exported", "ln_y_firm_lag", "coreness_lag", "coreness_x_c20", "complexity", "tpv_lag",
                  "single_product", "c20"))
    cc = panel.country
    for t in _lag_years(panel, years):
        core = coreness[t - 1].lookup() if (t - 1) in coreness else {}
        c20 = 1.0 if t == COVID_YEAR else 0.0
        for firm in panel.firms(t - 1):
            fm = panel.firm_marginal(firm, t - 1)
            for k in panel.basket(firm, t - 1):
                if k not in complexity:
                    b.drops["missing_complexity"] += 1
                    continue
                c = core.get((firm, k))
                if c is None:
                    b.drops["missing_coreness"] += 1
                    continue
                hs2 = k[:2]
                b.add({"country": cc, "firm_id": firm, "hs6": k, "year": t, "hs2": hs2,
                       "hs2_year": f"{hs2}:{t}"},
                      {"exported": float(panel.value(firm, k, t) > 0),
                       "ln_y_firm_lag": math.log(fm.total_cents / 100),
                       "coreness_lag": c, "coreness_x_c20": c * c20, "complexity": complexity[k],
                       "tpv_lag": float(_tpv_member(tpv, firm, k, t - 1)),
                       "single_product": float(fm.np == 1), "c20": c20})
    return b.frame("logit", "exported")


def pool_frames(frames: Sequence[RegressionFrame]) -> RegressionFrame:
    """Stack per-country frames of one kind; pooled frames get country dummies by default."""
    if not frames:
        raise ValueError("nothing to pool")
    kinds = {f.kind for f in frames}
    if len(kinds) != 1:
        raise ValueError(f"cannot pool frames of different kinds {sorted(kinds)}")
    first = frames[0]
    labels = {c: np.concatenate([f.labels[c] for f in frames]) for c in first.labels}
    numeric = {c: np.concatenate([f.numeric[c] for f in frames]) for c in first.numeric}
    drops: Counter = Counter()
    for f in frames:
        drops.update(f.drops)
    countries = {c for f in frames for c in f.labels["country"].tolist()}
    return RegressionFrame(first.kind, labels, numeric, first.outcome, dict(sorted(drops.items())),
                           pooled=len(countries) > 1)


def split_by_quartile(frame: RegressionFrame, quartiles: Mapping[str, Mapping[str, int | None]],
                      by_country: bool = False) -> dict[int, RegressionFrame]:
    """Split rows by product complexity quartile.

    ``quartiles`` maps a group ("ALL" for pooled cut points, else the country
    code) to product -> quartile. Rows without a quartile fall in no split.
    """
    countries = frame.labels["country"].tolist()
    products = frame.labels["hs6"].tolist()
    q = np.array([quartiles.get(c if by_country else "ALL", {}).get(k) or 0
                  for c, k in zip(countries, products)])
    return {i: frame.take(q == i) for i in (1, 2, 3, 4)}


def write_frame(frame: RegressionFrame, path: str | Path) -> Path:
    lab = list(frame.labels)
    num = list(frame.numeric)
    header = [f"{c}" for c in lab] + num
    rows = zip(*(frame.labels[c].tolist() for c in lab), *(frame.numeric[c].tolist() for c in num))
    path = write_table(path, header, rows)
    meta = {"kind": frame.kind, "outcome": frame.outcome, "pooled": int(frame.pooled),
            "labels": ";".join(lab), **{f"drop.{k}": v for k, v in frame.drops.items()}}
    write_table(Path(str(path) + ".meta"), ("key", "value"), sorted(meta.items()))
    return path


def read_frame(path: str | Path) -> RegressionFrame:
    meta = {r["key"]: r["value"] for r in read_table(Path(str(path) + ".meta"))}
    lab = meta["labels"].split(";")
    rows = read_table(path)
    cols = list(rows[0]) if rows else []
    labels = {c: np.array([r[c] for r in rows], dtype=object) for c in lab}
    numeric = {c: np.array([float(r[c]) for r in rows]) for c in cols if c not in lab}
    drops = {k[5:]: int(v) for k, v in meta.items() if k.startswith("drop.")}
    return RegressionFrame(meta["kind"], labels, numeric, meta["outcome"], drops, meta["pooled"] == "1")
