"""Revealed comparative advantage, the RCA-filtered firm x product matrix,
Jaccard product proximity and product coreness within firm baskets.

Ratios that feed thresholds or comparisons are carried as exact fractions of
integers; floats are only rendered at the edges.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from exportcore._io import fmt, read_table, write_table
from exportcore._parallel import map_shards
from exportcore.ingest import FirmProductPanel


@dataclass(frozen=True)
class RcaMatrix:
    year: int
    exact: Mapping[tuple[str, str], Fraction]

    def __getitem__(self, key: tuple[str, str]) -> float:
        v = self.exact.get(key)
        return float(v) if v is not None else 0.0

    def __len__(self) -> int:
        return len(self.exact)

    def items(self) -> Iterator[tuple[tuple[str, str], float]]:
        for key, v in self.exact.items():
            yield key, float(v)


def compute_rca(panel: FirmProductPanel, year: int) -> RcaMatrix:
    """RCA of every stored (firm, product) flow in ``year``.

    RCA = (X_ik / X_i) / (X_k / X), evaluated exactly as X_ik X / (X_i X_k).
    Only strictly positive flows are emitted; missing pairs have RCA 0.
    """
    panel.require(year)
    grand = panel.total(year)
    if grand <= 0:
        raise ValueError(f"no exports in {year}")
    pm = panel.product_marginals(year)
    out: dict[tuple[str, str], Fraction] = {}
    for firm, fm in panel.firm_marginals(year).items():
        if fm.total_cents <= 0:
            raise RuntimeError(f"firm {firm!r} has a zero total in {year}")
        for k, x in panel.basket(firm, year).items():
            out[(firm, k)] = Fraction(x * grand, fm.total_cents * pm[k].total_cents)
    return RcaMatrix(year, out)


@dataclass(frozen=True)
class SpecializationMatrix:
    year: int
    pairs: frozenset[tuple[str, str]]

    def __contains__(self, pair: tuple[str, str]) -> bool:
        return pair in self.pairs

    def __len__(self) -> int:
        return len(self.pairs)

    def by_firm(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for firm, k in sorted(self.pairs):
            out[firm].append(k)
        return dict(out)


def binarize(rca: RcaMatrix) -> SpecializationMatrix:
    return SpecializationMatrix(rca.year, frozenset(key for key, v in rca.exact.items() if v >= 1))


@dataclass(frozen=True)
class Edge:
    k: str
    kp: str
    lam: int
    lam_k: int
    lam_kp: int

    @property
    def union(self) -> int:
        return self.lam_k + self.lam_kp - self.lam

    @property
    def exact(self) -> Fraction:
        return Fraction(self.lam, self.union)

    @property
    def jaccard(self) -> float:
        return self.lam / self.union


class ProximityNetwork:
    """Symmetric product proximity for one country-year.

    Only the upper triangle (k < k') of co-exported pairs is stored; the
    diagonal J_kk = 1 is implicit and pairs never co-exported have J = 0.
    """

    def __init__(self, country: str, year: int, degrees: Mapping[str, int], edges: Sequence[Edge]):
        self.country = country
        self.year = year
        self.degrees = dict(sorted(degrees.items()))
        self.edges = tuple(sorted(edges, key=lambda e: (e.k, e.kp)))
        self._lookup = {(e.k, e.kp): e for e in self.edges}

    @property
    def products(self) -> tuple[str, ...]:
        return tuple(self.degrees)

    def __contains__(self, product: str) -> bool:
        return product in self.degrees

    def cooccurrence(self, k: str, kp: str) -> int:
        if k == kp:
            return self.degrees.get(k, 0)
        e = self._lookup.get((k, kp) if k < kp else (kp, k))
        return e.lam if e else 0

    def exact(self, k: str, kp: str) -> Fraction:
        if k == kp:
            return Fraction(1)
        e = self._lookup.get((k, kp) if k < kp else (kp, k))
        return e.exact if e else Fraction(0)

    def jaccard(self, k: str, kp: str) -> float:
        return float(self.exact(k, kp))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProximityNetwork):
            return NotImplemented
        return (self.country, self.year, self.degrees, self.edges) == (
            other.country, other.year, other.degrees, other.edges)


def _cooccurrence_shard(rows: Sequence[list[int]], n_products: int) -> sp.csr_matrix:
    indptr = [0]
    indices: list[int] = []
    for cols in rows:
        indices.extend(cols)
        indptr.append(len(indices))
    y = sp.csr_matrix((np.ones(len(indices), dtype=np.int64), indices, indptr),
                      shape=(len(rows), n_products))
    return (y.T @ y).tocsr()


def jaccard_network(y: SpecializationMatrix, country: str = "", year: int | None = None,
                    threads: int = 1) -> ProximityNetwork:
    """Jaccard proximity between products over the firms that export them with RCA >= 1.

    Co-occurrence counts are integer sums over firm shards, so the network is
    identical for any ``threads`` value.
    """
    if not y.pairs:
        raise ValueError("empty specialization matrix")
    year = y.year if year is None else year
    products = sorted({k for _, k in y.pairs})
    index = {k: i for i, k in enumerate(products)}
    rows = [sorted(index[k] for k in ks) for _, ks in sorted(y.by_firm().items())]
    parts = map_shards(lambda s: _cooccurrence_shard(s, len(products)), rows, threads)
    c = parts[0]
    for part in parts[1:]:
        c = c + part
    c = sp.triu(c).tocoo()
    deg = {products[i]: int(v) for i, j, v in zip(c.row, c.col, c.data) if i == j}
    edges = [Edge(products[i], products[j], int(v), deg[products[i]], deg[products[j]])
             for i, j, v in zip(c.row, c.col, c.data) if i < j and v > 0]
    return ProximityNetwork(country, year, deg, edges)


@dataclass(frozen=True)
class CorenessRow:
    firm_id: str
    product: str
    year: int
    exact: Fraction
    np: int
    share: float
    in_network: bool = True

    @property
    def coreness(self) -> float:
        return float(self.exact)


@dataclass(frozen=True)
class CorenessTable:
    country: str
    year: int
    rows: tuple[CorenessRow, ...]
    missing_products: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[CorenessRow]:
        return iter(self.rows)

    def lookup(self) -> dict[tuple[str, str], float]:
        return {(r.firm_id, r.product): r.coreness for r in self.rows}


def firm_coreness(basket: Mapping[str, int | Fraction], network: ProximityNetwork) -> dict[str, Fraction]:
    """Coreness of each product in one firm's basket.

    The sum over the basket includes the product itself with J_kk = 1, so the
    value is the export-weighted mean of J over the basket; X_ik cancels.
    """
    total = sum(basket.values())
    out = {}
    for k in basket:
        num = sum((network.exact(k, kp) * x for kp, x in basket.items()), Fraction(0))
        out[k] = Fraction(num) / total
    return out


def _coreness_shard(firms, panel, network, year):
    rows = []
    for firm in firms:
        basket = panel.basket(firm, year)
        total = sum(basket.values())
        values = firm_coreness(basket, network)
        for k, c in values.items():
            rows.append(CorenessRow(firm, k, year, c, len(basket), basket[k] / total, k in network))
    return rows


def coreness(panel: FirmProductPanel, network: ProximityNetwork, year: int,
             threads: int = 1) -> CorenessTable:
    panel.require(year)
    if network.year != year:
        raise ValueError(f"network is for {network.year}, panel slice is {year}")
    firms = panel.firms(year)
    parts = map_shards(lambda s: _coreness_shard(s, panel, network, year), firms, threads)
    rows = tuple(r for part in parts for r in part)
    missing = tuple(sorted({r.product for r in rows if not r.in_network}))
    return CorenessTable(network.country or panel.country, year, rows, missing)


NETWORK_HEADER = ("k", "k_prime", "lambda_kk", "lambda_k", "lambda_kp", "jaccard")
CORENESS_HEADER = ("country", "firm_id", "hs6", "year", "coreness", "np", "share", "in_network")


def write_network(network: ProximityNetwork, path: str | Path) -> Path:
    # diagonal rows carry the node list and degrees
    def rows():
        items = [(k, k, d, d, d, 1.0) for k, d in network.degrees.items()]
        items += [(e.k, e.kp, e.lam, e.lam_k, e.lam_kp, e.jaccard) for e in network.edges]
        yield from sorted(items, key=lambda r: (r[0], r[1]))
    return write_table(path, NETWORK_HEADER, rows())


def read_network(path: str | Path, country: str = "", year: int = 0) -> ProximityNetwork:
    deg, edges = {}, []
    for row in read_table(path):
        k, kp = row["k"], row["k_prime"]
        if k == kp:
            deg[k] = int(row["lambda_kk"])
        else:
            edges.append(Edge(k, kp, int(row["lambda_kk"]), int(row["lambda_k"]), int(row["lambda_kp"])))
    return ProximityNetwork(country, year, deg, edges)


def write_coreness(table: CorenessTable, path: str | Path) -> Path:
    rows = ((table.country, r.firm_id, r.product, r.year, fmt(r.coreness), r.np, fmt(r.share), r.in_network)
            for r in table.rows)
    return write_table(path, CORENESS_HEADER, rows)


def read_coreness(path: str | Path) -> CorenessTable:
    rows, country, year = [], "", 0
    for row in read_table(path):
        country, year = row["country"], int(row["year"])
        rows.append(CorenessRow(row["firm_id"], row["hs6"], year, Fraction(row["coreness"]),
                                int(row["np"]), float(row["share"]), row["in_network"] == "1"))
    missing = tuple(sorted({r.product for r in rows if not r.in_network}))
    return CorenessTable(country, year, tuple(rows), missing)
