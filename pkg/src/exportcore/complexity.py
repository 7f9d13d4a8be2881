"""External product complexity (PCI): year averaging and quartiles."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from exportcore._io import write_table
from exportcore.ingest import ConfigError, InsufficientDataError, assign_quartile, quartile_cuts


class DuplicateRowsError(ValueError):
    def __init__(self, offenders: list[tuple[str, int]]):
        self.offenders = offenders
        listing = ", ".join(f"({p}, {y})" for p, y in offenders)
        super().__init__(f"duplicate (product, year) rows: {listing}")


@dataclass(frozen=True)
class ComplexityTable:
    values: Mapping[str, float]
    years: tuple[int, ...] = ()
    missing: tuple[str, ...] = ()

    def __contains__(self, product: str) -> bool:
        return product in self.values

    def __getitem__(self, product: str) -> float:
        return self.values[product]

    def get(self, product: str, default=None):
        return self.values.get(product, default)

    def __len__(self) -> int:
        return len(self.values)


def parse_pci(lines: Iterable[str], years: Iterable[int] | None = None, delimiter: str = ",") -> ComplexityTable:
    """Average PCI per product over ``years`` (all years when None).

    Blank or non-numeric ``pci`` cells count as missing. Products with no
    value in any selected year are left out and listed in ``missing``.
    """
    wanted = set(years) if years is not None else None
    reader = csv.DictReader(lines, delimiter=delimiter)
    if reader.fieldnames is None or not {"product", "year", "pci"} <= set(reader.fieldnames):
        raise ConfigError("PCI file needs columns product, year, pci")
    seen: dict[tuple[str, int], int] = {}
    dupes: list[tuple[str, int]] = []
    obs: dict[str, list[Fraction]] = defaultdict(list)
    products: set[str] = set()
    for row in reader:
        product, year = row["product"].strip(), int(row["year"])
        if wanted is not None and year not in wanted:
            continue
        key = (product, year)
        if key in seen:
            dupes.append(key)
            continue
        seen[key] = 1
        products.add(product)
        text = (row["pci"] or "").strip()
        try:
            v = float(text)
        except ValueError:
            continue
        if np.isfinite(v):
            obs[product].append(Fraction(v))
    if dupes:
        raise DuplicateRowsError(sorted(set(dupes)))
    # exact rational mean so the result does not depend on row order
    values = {p: float(sum(v) / len(v)) for p, v in sorted(obs.items())}
    missing = tuple(sorted(products - set(values)))
    used = tuple(sorted(wanted)) if wanted is not None else tuple(sorted({y for _, y in seen}))
    return ComplexityTable(values, used, missing)


def load_pci(path: str | Path, years: Iterable[int] | None = None, delimiter: str = ",") -> ComplexityTable:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_pci(fh, years, delimiter)


def _weighted_cuts(values: list[float], weights: list[float]) -> tuple[float, float, float]:
    order = np.argsort(values, kind="stable")
    v = np.asarray(values)[order]
    cw = np.cumsum(np.asarray(weights, dtype=float)[order])
    cw /= cw[-1]
    return tuple(float(v[np.searchsorted(cw, q)]) for q in (0.25, 0.5, 0.75))


def quartile_assign(table: ComplexityTable, universe: Iterable[str],
                    weights: Mapping[str, float] | None = None) -> dict[str, int | None]:
    """Complexity quartile (1-4) per product of ``universe``; None when uncovered.

    Cut points come from the unweighted distribution over covered products,
    or from the trade-weighted distribution when ``weights`` is given.
    """
    universe = sorted(set(universe))
    if not universe:
        raise ValueError("empty product universe")
    covered = [p for p in universe if p in table]
    if len(covered) < 4:
        raise InsufficientDataError(f"only {len(covered)} products with complexity; need 4")
    vals = [table[p] for p in covered]
    if weights is None:
        cuts = quartile_cuts(vals)
    else:
        cuts = _weighted_cuts(vals, [weights.get(p, 0.0) for p in covered])
    return {p: (assign_quartile(table[p], cuts) if p in table else None) for p in universe}


def write_complexity(table: ComplexityTable, quartiles: Mapping[str, int | None], path: str | Path) -> Path:
    rows = ((p, table.get(p), quartiles.get(p)) for p in sorted(set(table.values) | set(quartiles)))
    return write_table(path, ("product", "pci_mean", "quartile"), rows)
