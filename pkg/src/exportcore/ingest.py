"""Transaction parsing, re-export filtering, firm-product panels and the
descriptive tables built on them.

Money is carried as integer US cents from the moment a row is parsed, so
every sum in this module is exact and independent of summation order.
"""
from __future__ import annotations

import csv
import glob
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_EVEN, Decimal, InvalidOperation
from pathlib import Path
from statistics import median
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from exportcore._io import cents_to_str, read_table, write_table
from exportcore._parallel import map_shards

HS6 = re.compile(r"^\d{6}$")

# logical field -> default column name in the input file
DEFAULT_SCHEMA: dict[str, str] = {
    "firm_id": "firm_id",
    "product": "hs6",
    "destination": "destination",
    "year": "year",
    "month": "month",
    "value": "value_usd",
    "re_export": "re_export",
}

DIVERSIFICATION_BINS = ("1", "2", "3", "4", "5-10", ">10")


class ConfigError(ValueError):
    """Raised for unusable configuration (missing columns, bad options)."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class TransactionRecord:
    firm_id: str
    product: str
    destination: str
    year: int
    month: int
    value_cents: int
    re_export: bool = False

    @property
    def value(self) -> float:
        return self.value_cents / 100

    @property
    def quarter(self) -> int:
        return (self.month - 1) // 3 + 1


@dataclass(frozen=True, slots=True)
class RowReject:
    source: str
    line: int
    reason: str


@dataclass(frozen=True)
class TransactionSet:
    records: tuple[TransactionRecord, ...] = ()
    country: str = ""
    rejects: tuple[RowReject, ...] = ()
    removed_re_exports: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TransactionRecord]:
        return iter(self.records)

    @property
    def n_re_export(self) -> int:
        return sum(1 for r in self.records if r.re_export)


def parse_value_cents(text: str) -> int:
    try:
        d = Decimal(text.strip())
    except InvalidOperation:
        raise ValueError("unparseable value") from None
    if not d.is_finite():
        raise ValueError("unparseable value")
    if d < 0:
        raise ValueError("negative value")
    return int((d * 100).quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


def _parse_flag(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "t", "yes", "y"):
        return True
    if t in ("0", "false", "f", "no", "n", ""):
        return False
    raise ValueError("bad re_export flag")


def _parse_row(row: list[str], idx: Mapping[str, int]) -> TransactionRecord:
    firm = row[idx["firm_id"]].strip()
    if not firm:
        raise ValueError("empty firm_id")
    product = row[idx["product"]].strip()
    if not HS6.match(product):
        raise ValueError("product is not a 6-digit HS code")
    try:
        year = int(row[idx["year"]])
    except ValueError:
        raise ValueError("unparseable year") from None
    try:
        month = int(row[idx["month"]])
    except ValueError:
        raise ValueError("unparseable month") from None
    if not 1 <= month <= 12:
        raise ValueError("month out of range")
    value = parse_value_cents(row[idx["value"]])
    flag = _parse_flag(row[idx["re_export"]]) if "re_export" in idx else False
    return TransactionRecord(firm, product, row[idx["destination"]].strip(), year, month, value, flag)


def parse_transactions(stream: Iterable[str], schema: Mapping[str, str] | None = None,
                       delimiter: str = ",", country: str = "",
                       source: str = "<stream>") -> TransactionSet:
    """Parse delimited transaction lines (header first) into a TransactionSet.

    ``schema`` maps logical field names (see ``DEFAULT_SCHEMA``) to the column
    names used by the file. Malformed rows are collected as ``RowReject``
    entries carrying the 1-based line number, never silently dropped.
    """
    columns = dict(DEFAULT_SCHEMA)
    if schema:
        unknown = set(schema) - set(DEFAULT_SCHEMA)
        if unknown:
            raise ConfigError(f"unknown schema fields: {sorted(unknown)}")
        columns.update(schema)
    reader = csv.reader(stream, delimiter=delimiter)
    try:
        header = [h.strip().lstrip("﻿") for h in next(reader)]
    except StopIteration:
        raise ConfigError(f"{source}: missing header row") from None
    idx: dict[str, int] = {}
    missing = []
    for fieldname, col in columns.items():
        if col in header:
            idx[fieldname] = header.index(col)
        else:
            missing.append(col)
    if missing:
        raise ConfigError(f"{source}: missing mandatory column(s): {', '.join(missing)}")

    records: list[TransactionRecord] = []
    rejects: list[RowReject] = []
    width = len(header)
    for row in reader:
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != width:
            rejects.append(RowReject(source, reader.line_num, f"expected {width} fields, got {len(row)}"))
            continue
        try:
            records.append(_parse_row(row, idx))
        except ValueError as exc:
            rejects.append(RowReject(source, reader.line_num, str(exc)))
    return TransactionSet(tuple(records), country, tuple(rejects))


def read_transactions(pattern: str | Sequence[str], schema: Mapping[str, str] | None = None,
                      delimiter: str = ",", country: str = "") -> TransactionSet:
    """Parse every file matching ``pattern`` (a glob or list of paths), in sorted path order."""
    if isinstance(pattern, str):
        paths = sorted(glob.glob(pattern))
    else:
        paths = sorted(str(p) for p in pattern)
    if not paths:
        raise ConfigError(f"no input files match {pattern!r}")
    records: list[TransactionRecord] = []
    rejects: list[RowReject] = []
    for p in paths:
        with open(p, newline="", encoding="utf-8") as fh:
            ts = parse_transactions(fh, schema, delimiter, country, source=p)
        records.extend(ts.records)
        rejects.extend(ts.rejects)
    return TransactionSet(tuple(records), country, tuple(rejects))


def filter_re_exports(ts: TransactionSet) -> TransactionSet:
    kept = tuple(r for r in ts.records if not r.re_export)
    removed = len(ts.records) - len(kept)
    return replace(ts, records=kept, removed_re_exports=ts.removed_re_exports + removed)


def period_key(year: int, month: int, granularity: str) -> int:
    """Annual periods are the year itself; quarterly periods are ``year*10 + quarter``."""
    if granularity == "annual":
        return year
    if granularity == "quarterly":
        return year * 10 + (month - 1) // 3 + 1
    raise ConfigError(f"unknown period granularity {granularity!r}")


@dataclass(frozen=True)
class FirmMarginal:
    total_cents: int
    np: int
    nd: int


@dataclass(frozen=True)
class ProductMarginal:
    total_cents: int
    exporters: int


class FirmProductPanel:
    """Sparse period-indexed firm x product export values in integer cents.

    Zero flows are never stored. The panel is immutable once built; all
    mappings handed out are read-only views.
    """

    def __init__(self, values: Mapping[int, Mapping[str, Mapping[str, int]]],
                 destinations: Mapping[int, Mapping[str, int]] | None = None,
                 country: str = "", granularity: str = "annual"):
        self.country = country
        self.granularity = granularity
        destinations = destinations or {}
        vals: dict[int, dict[str, MappingProxyType]] = {}
        fmarg: dict[int, dict[str, FirmMarginal]] = {}
        pmarg: dict[int, dict[str, ProductMarginal]] = {}
        for t in sorted(values):
            firms = {}
            fm = {}
            ptot: Counter = Counter()
            pcnt: Counter = Counter()
            for firm in sorted(values[t]):
                basket = {k: int(v) for k, v in sorted(values[t][firm].items()) if v}
                if any(v < 0 for v in basket.values()):
                    raise ValueError(f"negative export value for firm {firm!r}")
                if not basket:
                    continue
                firms[firm] = MappingProxyType(basket)
                nd = int(destinations.get(t, {}).get(firm, 0))
                fm[firm] = FirmMarginal(sum(basket.values()), len(basket), nd)
                for k, v in basket.items():
                    ptot[k] += v
                    pcnt[k] += 1
            vals[t] = firms
            fmarg[t] = fm
            pmarg[t] = {k: ProductMarginal(ptot[k], pcnt[k]) for k in sorted(ptot)}
        self._values = vals
        self._firm_marginals = fmarg
        self._product_marginals = pmarg

    @property
    def periods(self) -> tuple[int, ...]:
        return tuple(self._values)

    years = periods

    def __contains__(self, period: int) -> bool:
        return period in self._values

    def require(self, period: int) -> None:
        if period not in self._values:
            raise KeyError(f"period {period} not present in panel (have {list(self._values)})")

    def firms(self, period: int) -> list[str]:
        return list(self._values.get(period, {}))

    def products(self, period: int) -> list[str]:
        return list(self._product_marginals.get(period, {}))

    def all_products(self) -> list[str]:
        return sorted({k for pm in self._product_marginals.values() for k in pm})

    def basket(self, firm: str, period: int) -> Mapping[str, int]:
        return self._values.get(period, {}).get(firm, MappingProxyType({}))

    def value(self, firm: str, product: str, period: int) -> int:
        return self.basket(firm, period).get(product, 0)

    def firm_marginal(self, firm: str, period: int) -> FirmMarginal | None:
        return self._firm_marginals.get(period, {}).get(firm)

    def firm_marginals(self, period: int) -> Mapping[str, FirmMarginal]:
        return MappingProxyType(self._firm_marginals.get(period, {}))

    def product_marginals(self, period: int) -> Mapping[str, ProductMarginal]:
        return MappingProxyType(self._product_marginals.get(period, {}))

    def total(self, period: int) -> int:
        return sum(m.total_cents for m in self._firm_marginals.get(period, {}).values())

    def entries(self) -> Iterator[tuple[str, str, int, int]]:
        """Yield ``(firm, product, period, cents)`` in canonical order."""
        for t, firms in self._values.items():
            for firm, basket in firms.items():
                for k, v in basket.items():
                    yield firm, k, t, v

    def __len__(self) -> int:
        return sum(len(b) for firms in self._values.values() for b in firms.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FirmProductPanel):
            return NotImplemented
        return (list(self.entries()) == list(other.entries())
                and self._firm_marginals == other._firm_marginals
                and self.country == other.country)


def _aggregate_shard(records: Sequence[TransactionRecord], granularity: str):
    values: Counter = Counter()
    dests: dict[tuple[int, str], set[str]] = defaultdict(set)
    for r in records:
        t = period_key(r.year, r.month, granularity)
        values[(t, r.firm_id, r.product)] += r.value_cents
        dests[(t, r.firm_id)].add(r.destination)
    return values, dests


def aggregate_panel(ts: TransactionSet, period: str = "annual", threads: int = 1) -> FirmProductPanel:
    """Sum transaction values per (firm, product, period).

    Records are put in canonical order, sharded, summed per shard in integer
    cents and merged; the result is bit-identical for any row order and any
    ``threads`` value. Re-export rows must already be filtered out.
    """
    if period not in ("annual", "quarterly"):
        raise ConfigError(f"unknown period granularity {period!r}")
    if any(r.re_export for r in ts.records):
        raise ValueError("aggregate_panel expects re-exports to be filtered first")
    ordered = sorted(ts.records, key=lambda r: (r.firm_id, r.product, r.year, r.month, r.destination, r.value_cents))
    parts = map_shards(lambda s: _aggregate_shard(s, period), ordered, threads)
    values: Counter = Counter()
    dests: dict[tuple[int, str], set[str]] = defaultdict(set)
    for v, d in parts:
        values.update(v)
        for key, s in d.items():
            dests[key] |= s
    nested: dict[int, dict[str, dict[str, int]]] = defaultdict(lambda: defaultdict(dict))
    for (t, firm, k), cents in values.items():
        if cents > 0:
            nested[t][firm][k] = cents
    nd: dict[int, dict[str, int]] = defaultdict(dict)
    for (t, firm), s in dests.items():
        nd[t][firm] = len(s)
    return FirmProductPanel(nested, nd, country=ts.country, granularity=period)


@dataclass(frozen=True)
class QuarterRow:
    year: int
    quarter: int
    total_cents: int
    exporters: int
    firm_products: int


def quarterly_aggregates(ts: TransactionSet) -> list[QuarterRow]:
    totals: Counter = Counter()
    firms: dict[tuple[int, int], set[str]] = defaultdict(set)
    pairs: dict[tuple[int, int], set[tuple[str, str]]] = defaultdict(set)
    for r in ts.records:
        q = (r.year, r.quarter)
        totals[q] += r.value_cents
        firms[q].add(r.firm_id)
        pairs[q].add((r.firm_id, r.product))
    return [QuarterRow(y, q, totals[(y, q)], len(firms[(y, q)]), len(pairs[(y, q)]))
            for (y, q) in sorted(totals)]


def diversification_bin(np_count: int) -> str:
    if np_count < 1:
        raise ValueError("firm with no products")
    if np_count <= 4:
        return str(np_count)
    return "5-10" if np_count <= 10 else ">10"


def quartile_cuts(values: Sequence[float]) -> tuple[float, float, float]:
    """Cut points at the 25/50/75% quantiles (linear interpolation between order statistics)."""
    q = np.quantile(np.asarray(values, dtype=float), [0.25, 0.5, 0.75])
    return float(q[0]), float(q[1]), float(q[2])


def assign_quartile(value: float, cuts: Sequence[float]) -> int:
    # a value sitting exactly on a cut point belongs to the lower quartile
    return 1 + sum(1 for c in cuts if value > c)


@dataclass(frozen=True)
class FirmSummary:
    firm_id: str
    year: int
    total_cents: int
    np: int
    nd: int
    size_quartile: int = 0
    country: str = ""

    @property
    def total_exports(self) -> float:
        return self.total_cents / 100

    @property
    def log_size(self) -> float:
        return math.log(self.total_cents / 100)

    @property
    def diversification_bin(self) -> str:
        return diversification_bin(self.np)


def firm_summaries(panel: FirmProductPanel, year: int) -> list[FirmSummary]:
    """One summary per firm exporting in ``year``; quartiles need at least 4 firms."""
    panel.require(year)
    marg = panel.firm_marginals(year)
    rows = [FirmSummary(f, year, m.total_cents, m.np, m.nd, 0, panel.country) for f, m in marg.items()]
    if len(rows) >= 4:
        cuts = quartile_cuts([r.log_size for r in rows])
        rows = [replace(r, size_quartile=assign_quartile(r.log_size, cuts)) for r in rows]
    return rows


@dataclass(frozen=True)
class DiversificationRow:
    level: str
    n_firms: int
    firm_share: float
    export_share: float
    mean_destinations: float
    median_total_exports: float


def diversification_table(panel: FirmProductPanel, year: int) -> list[DiversificationRow]:
    panel.require(year)
    marg = panel.firm_marginals(year)
    grand = sum(m.total_cents for m in marg.values())
    n_all = len(marg)
    groups: dict[str, list[FirmMarginal]] = {b: [] for b in DIVERSIFICATION_BINS}
    for m in marg.values():
        groups[diversification_bin(m.np)].append(m)
    rows = []
    for level, ms in groups.items():
        if ms:
            tot = sum(m.total_cents for m in ms)
            rows.append(DiversificationRow(
                level, len(ms), 100.0 * len(ms) / n_all, 100.0 * tot / grand,
                sum(m.nd for m in ms) / len(ms), median(m.total_cents for m in ms) / 100))
        else:
            rows.append(DiversificationRow(level, 0, 0.0, 0.0, float("nan"), float("nan")))
    return rows


@dataclass(frozen=True)
class SizeQuartileRow:
    quartile: int
    total_exports: float
    n_firms: int
    mean_exports: float
    mean_np: float
    mean_nd: float


def size_quartile_table(summaries: Sequence[FirmSummary]) -> list[SizeQuartileRow]:
    if len(summaries) < 4:
        raise InsufficientDataError("insufficient population for quartiles")
    cuts = quartile_cuts([s.log_size for s in summaries])
    groups: dict[int, list[FirmSummary]] = {q: [] for q in (1, 2, 3, 4)}
    for s in summaries:
        groups[assign_quartile(s.log_size, cuts)].append(s)
    rows = []
    for q, ss in groups.items():
        n = len(ss)
        tot = sum(s.total_cents for s in ss)
        rows.append(SizeQuartileRow(
            q, tot / 100, n,
            tot / 100 / n if n else float("nan"),
            sum(s.np for s in ss) / n if n else float("nan"),
            sum(s.nd for s in ss) / n if n else float("nan")))
    return rows


PANEL_HEADER = ("country", "firm_id", "hs6", "period", "value_usd", "firm_nd")


def write_panel(panel: FirmProductPanel, path: str | Path) -> Path:
    def rows():
        for firm, k, t, cents in panel.entries():
            yield panel.country, firm, k, t, cents_to_str(cents), panel.firm_marginal(firm, t).nd
    return write_table(path, PANEL_HEADER, rows())


def read_panel(path: str | Path, granularity: str = "annual") -> FirmProductPanel:
    nested: dict[int, dict[str, dict[str, int]]] = defaultdict(lambda: defaultdict(dict))
    nd: dict[int, dict[str, int]] = defaultdict(dict)
    country = ""
    for row in read_table(path):
        t = int(row["period"])
        country = row["country"]
        nested[t][row["firm_id"]][row["hs6"]] = parse_value_cents(row["value_usd"])
        nd[t][row["firm_id"]] = int(row["firm_nd"])
    return FirmProductPanel(nested, nd, country=country, granularity=granularity)
