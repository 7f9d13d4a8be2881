"""Year-over-year basket change, typical product vectors, kept/dropped
flags and the binned size-diversification fit."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from exportcore.ingest import FirmProductPanel, FirmSummary, TransactionSet


class NoBaselineError(KeyError):
    pass


@dataclass(frozen=True)
class BasketChangeRecord:
    firm_id: str
    year_from: int
    year_to: int
    exact: Fraction
    exited: bool

    @property
    def bray_curtis(self) -> float:
        return float(self.exact)


def bray_curtis_shares(before: Mapping[str, int | Fraction], after: Mapping[str, int | Fraction]) -> Fraction:
    """Bray-Curtis similarity of two baskets, computed on export shares.

    An empty basket is the zero share vector, so any basket against an empty
    one scores 0.
    """
    tb, ta = sum(before.values()), sum(after.values())
    xb = {k: Fraction(v) / tb for k, v in before.items()} if tb else {}
    xa = {k: Fraction(v) / ta for k, v in after.items()} if ta else {}
    keys = set(xb) | set(xa)
    den = sum(xb.values(), Fraction(0)) + sum(xa.values(), Fraction(0))
    if den == 0:
        raise ValueError("both baskets are empty")
    num = sum((abs(xa.get(k, 0) - xb.get(k, 0)) for k in keys), Fraction(0))
    return 1 - num / den


def bray_curtis(panel: FirmProductPanel, firm: str, t: int) -> BasketChangeRecord:
    prev = panel.basket(firm, t - 1)
    if not prev:
        raise NoBaselineError(f"no baseline basket for firm {firm!r} in {t - 1}")
    cur = panel.basket(firm, t)
    return BasketChangeRecord(firm, t - 1, t, bray_curtis_shares(prev, cur), not cur)


def bray_curtis_all(panel: FirmProductPanel, t: int) -> list[BasketChangeRecord]:
    panel.require(t - 1)
    return [bray_curtis(panel, f, t) for f in panel.firms(t - 1)]


@dataclass(frozen=True)
class TpvAssignment:
    firm_id: str
    year: int
    tpv: frozenset[str] | None
    n_destinations: int


def _modal_set(by_dest: Mapping[str, Mapping[str, int]]) -> frozenset[str] | None:
    freq: Counter = Counter()
    value: Counter = Counter()
    for basket in by_dest.values():
        s = frozenset(basket)
        freq[s] += 1
        value[s] += sum(basket.values())
    if len(by_dest) < 2 or not freq:
        return None
    best = min(freq, key=lambda s: (-freq[s], -value[s], sorted(s)))
    return best if freq[best] >= 2 else None


def _destination_baskets(ts: TransactionSet, year: int) -> dict[str, dict[str, dict[str, int]]]:
    out: dict[str, dict[str, dict[str, int]]] = defaultdict(lambda: defaultdict(lambda: defaultdict(int)))
    for r in ts.records:
        if r.year == year and not r.re_export and r.value_cents > 0:
            out[r.firm_id][r.destination][r.product] += r.value_cents
    return out


def typical_product_vector(ts: TransactionSet, firm: str, year: int) -> TpvAssignment:
    """The product set shipped identically to the most destinations.

    It must be shared by at least two destinations; ties go to the larger
    total value and then to the lexicographically smaller product list.
    """
    by_dest = _destination_baskets(ts, year).get(firm, {})
    return TpvAssignment(firm, year, _modal_set(by_dest), len(by_dest))


def typical_product_vectors(ts: TransactionSet, year: int) -> dict[str, TpvAssignment]:
    baskets = _destination_baskets(ts, year)
    return {f: TpvAssignment(f, year, _modal_set(baskets[f]), len(baskets[f])) for f in sorted(baskets)}


def kept_dropped(panel: FirmProductPanel, t: int) -> dict[tuple[str, str], str]:
    panel.require(t)
    panel.require(t + 1)
    out = {}
    for firm in panel.firms(t):
        nxt = panel.basket(firm, t + 1)
        for k in panel.basket(firm, t):
            out[(firm, k)] = "kept" if k in nxt else "dropped"
    return out


@dataclass(frozen=True)
class BinStat:
    n_firms: int
    mean_log_size: float
    mean_np: float


@dataclass(frozen=True)
class ExponentialFit:
    a: float
    b: float
    bins: tuple[BinStat, ...]


def fit_exponential(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Least-squares fit of ln y = ln a + b x; returns (a, b)."""
    x = np.asarray(x, dtype=float)
    ly = np.log(np.asarray(y, dtype=float))
    if len(x) < 2:
        raise ValueError("need at least two points")
    b, ln_a = np.polyfit(x, ly, 1)
    return float(np.exp(ln_a)), float(b)


def binned_exponential_fit(summaries: Sequence[FirmSummary], n_bins: int = 20) -> ExponentialFit:
    """Fit NP = a exp(b log_size) on equal-count bins of firms ordered by size."""
    if len(summaries) < n_bins:
        raise ValueError(f"need at least {n_bins} firms, got {len(summaries)}")
    ordered = sorted(summaries, key=lambda s: (s.log_size, s.firm_id))
    bins = []
    for chunk in np.array_split(np.arange(len(ordered)), n_bins):
        ss = [ordered[i] for i in chunk]
        mean_np = sum(s.np for s in ss) / len(ss)
        if mean_np <= 0:
            raise RuntimeError("bin with zero mean product count")
        bins.append(BinStat(len(ss), float(np.mean([s.log_size for s in ss])), mean_np))
    a, b = fit_exponential([s.mean_log_size for s in bins], [s.mean_np for s in bins])
    return ExponentialFit(a, b, tuple(bins))


def histogram(values: Iterable[float], edges: Sequence[float]) -> list[tuple[float, float, int]]:
    counts, e = np.histogram(np.asarray(list(values), dtype=float), bins=np.asarray(edges, dtype=float))
    return [(float(e[i]), float(e[i + 1]), int(c)) for i, c in enumerate(counts)]
