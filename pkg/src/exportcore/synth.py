"""Synthetic customs transactions with planted structure.

Products are split into capability blocks. Each firm has a home block and
fills its basket preferring home-block products; the expected product count
grows exponentially with log firm size; out-of-block products are dropped
more often and grow more slowly from one year to the next. Every firm draws
from its own counter-based stream keyed by (seed, firm index), so output is
identical whatever the thread count.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from exportcore._io import cents_to_str, write_table
from exportcore._parallel import map_shards
from exportcore.ingest import ConfigError, TransactionRecord, TransactionSet


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 20220503
    country: str = "SY"
    n_firms: int = 5000
    n_products: int = 200
    n_blocks: int = 20
    n_chapters: int = 5
    n_destinations: int = 40
    years: tuple[int, ...] = (2018, 2019, 2020)
    branching: float = 0.3          # b in E[NP] = exp(b (log size - size_offset))
    size_offset: float = 8.0
    size_mu: float = 12.0
    size_sigma: float = 2.0
    size_drift: float = 0.1
    p_in: float = 0.95              # sampling weight of a home-block product
    p_out: float = 0.02             # sampling weight of any other product
    drop_in: float = 0.05
    drop_out: float = 0.35
    growth_in: float = 0.15
    growth_out: float = -0.15
    value_sigma: float = 0.8
    growth_sigma: float = 0.3
    mean_destinations: float = 3.0
    full_basket_prob: float = 0.6
    re_export_rate: float = 0.02
    pci_missing_rate: float = 0.05

    def __post_init__(self):
        for name in ("p_in", "p_out", "drop_in", "drop_out", "full_basket_prob", "re_export_rate",
                     "pci_missing_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} is not a probability")
        if self.p_in < self.p_out:
            raise ConfigError("p_in must be at least p_out")
        if self.p_in == 0:
            raise ConfigError("p_in must be positive")
        if not 1 <= self.n_blocks <= self.n_products:
            raise ConfigError("n_blocks must be between 1 and n_products")
        if not 1 <= self.n_chapters <= 90 or self.n_products > 9999:
            raise ConfigError("at most 90 chapters and 9999 products")
        if self.n_firms < 1 or self.n_destinations < 1 or not self.years:
            raise ConfigError("need firms, destinations and years")
        top = math.exp(self.branching * (self.size_mu + 5 * self.size_sigma - self.size_offset))
        if top > self.n_products:
            raise ConfigError(f"expected product count {top:.0f} at the top of the size range "
                              f"exceeds n_products={self.n_products}")

    @classmethod
    def from_mapping(cls, m) -> "SynthConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in m.items():
            if key not in types:
                raise ConfigError(f"unknown synth option {key!r}")
            if key == "years":
                kwargs[key] = tuple(int(y) for y in str(raw).replace(",", " ").split())
            elif types[key] in ("int", int):
                kwargs[key] = int(raw)
            elif types[key] in ("str", str):
                kwargs[key] = str(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path, section: str = "synth") -> "SynthConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not cp.read(path, encoding="utf-8"):
            raise FileNotFoundError(path)
        return cls.from_mapping(cp[section] if cp.has_section(section) else {})

    def block_of(self, index: int) -> int:
        return index * self.n_blocks // self.n_products

    def product_code(self, index: int) -> str:
        # chapters cut across blocks so firm x chapter groups mix related and unrelated products
        chapter = 10 + index % self.n_chapters
        return f"{chapter:02d}{index:04d}"

    def product_codes(self) -> list[str]:
        return [self.product_code(i) for i in range(self.n_products)]

    def blocks(self) -> dict[str, int]:
        return {self.product_code(i): self.block_of(i) for i in range(self.n_products)}

    def firm_id(self, index: int) -> str:
        return f"F{index:07d}"


def firm_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def _split_cents(total: int, weights: np.ndarray, minimum: int = 1) -> list[int]:
    """Split ``total`` cents into len(weights) parts of at least ``minimum`` cents (largest remainder)."""
    n = len(weights)
    if total < n * minimum:
        raise ValueError("not enough cents to split")
    rest = total - n * minimum
    raw = weights / weights.sum() * rest
    base = np.floor(raw).astype(np.int64)
    short = rest - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return [int(b) + minimum for b in base]


def _draw_products(rng, cfg: SynthConfig, home: int, count: int, exclude: set[int]) -> list[int]:
    idx = np.array([i for i in range(cfg.n_products) if i not in exclude])
    if count <= 0 or len(idx) == 0:
        return []
    blocks = idx * cfg.n_blocks // cfg.n_products
    w = np.where(blocks == home, cfg.p_in, cfg.p_out)
    if w.sum() == 0:
        w = np.ones(len(idx))
    count = min(count, int(np.count_nonzero(w)))
    picked = rng.choice(idx, size=count, replace=False, p=w / w.sum())
    return sorted(int(i) for i in picked)


def _target_np(rng, cfg: SynthConfig, log_size: float) -> int:
    m = max(1.0, math.exp(cfg.branching * (log_size - cfg.size_offset)))
    lo = math.floor(m)
    n = lo + int(rng.random() < m - lo)
    return min(n, cfg.n_products)


def _firm_records(cfg: SynthConfig, index: int) -> list[TransactionRecord]:
    rng = firm_stream(cfg.seed, index)
    firm = cfg.firm_id(index)
    home = int(rng.integers(cfg.n_blocks))
    log_size = float(rng.normal(cfg.size_mu, cfg.size_sigma))
    nd = 1 + int(rng.poisson(max(cfg.mean_destinations - 1 + 0.3 * (log_size - cfg.size_mu), 0.0)))
    nd = min(nd, cfg.n_destinations)
    dests = sorted(int(d) for d in rng.choice(cfg.n_destinations, size=nd, replace=False))
    weights: dict[int, float] = {}
    out: list[TransactionRecord] = []
    for y_i, year in enumerate(cfg.years):
        if y_i == 0:
            basket = _draw_products(rng, cfg, home, _target_np(rng, cfg, log_size), set())
            for k in basket:
                weights[k] = float(rng.lognormal(0.0, cfg.value_sigma))
        else:
            log_size += float(rng.normal(0.0, cfg.size_drift))
            survivors = []
            for k in sorted(weights):
                in_block = cfg.block_of(k) == home
                if rng.random() >= (cfg.drop_in if in_block else cfg.drop_out):
                    g = cfg.growth_in if in_block else cfg.growth_out
                    weights[k] *= math.exp(g + float(rng.normal(0.0, cfg.growth_sigma)))
                    survivors.append(k)
            weights = {k: weights[k] for k in survivors}
            target = _target_np(rng, cfg, log_size)
            for k in _draw_products(rng, cfg, home, target - len(weights), set(weights)):
                weights[k] = float(rng.lognormal(-0.5, cfg.value_sigma))
        products = sorted(weights)
        if not products:
            continue
        floor = nd * 3
        total = max(int(round(math.exp(log_size) * 100)), len(products) * floor)
        values = _split_cents(total, np.array([weights[k] for k in products]), floor)
        # destination product sets: the full basket or a random non-empty subset
        shipped: dict[int, list[int]] = {}
        for d in dests:
            if len(products) == 1 or rng.random() < cfg.full_basket_prob:
                shipped[d] = list(products)
            else:
                mask = rng.random(len(products)) < 0.5
                if not mask.any():
                    mask[int(rng.integers(len(products)))] = True
                shipped[d] = [k for k, m in zip(products, mask) if m]
        for k in products:
            if not any(k in s for s in shipped.values()):
                shipped[dests[0]].append(k)
        for k, v in zip(products, values):
            ds = [d for d in dests if k in shipped[d]]
            for d, dv in zip(ds, _split_cents(v, rng.dirichlet(np.ones(len(ds))))):
                n_months = min(int(rng.integers(1, 4)), dv)
                months = sorted(int(m) + 1 for m in rng.choice(12, size=n_months, replace=False))
                for mth, mv in zip(months, _split_cents(dv, rng.dirichlet(np.ones(n_months)))):
                    out.append(TransactionRecord(firm, cfg.product_code(k), f"D{d:02d}", year, mth, mv, False))
        if rng.random() < cfg.re_export_rate:
            k = int(rng.integers(cfg.n_products))
            out.append(TransactionRecord(firm, cfg.product_code(k), f"D{dests[0]:02d}", year,
                                         int(rng.integers(1, 13)), int(rng.integers(100, 100000)), True))
    return out


def generate(config: SynthConfig, threads: int = 1) -> TransactionSet:
    parts = map_shards(lambda s: [r for i in s for r in _firm_records(config, i)],
                       range(config.n_firms), threads)
    return TransactionSet(tuple(r for p in parts for r in p), config.country)


def generate_pci(config: SynthConfig, years: Sequence[int] = (2015, 2016, 2017)) -> list[tuple[str, int, str]]:
    """Synthetic complexity rows (product, year, pci); blank pci marks a missing value."""
    rng = firm_stream(config.seed, -1 % (2**63))
    block_level = rng.normal(0.0, 1.0, config.n_blocks)
    rows = []
    for i in range(config.n_products):
        base = block_level[config.block_of(i)] + rng.normal(0.0, 0.5)
        for y in years:
            v = base + rng.normal(0.0, 0.1)
            missing = rng.random() < config.pci_missing_rate
            rows.append((config.product_code(i), y, "" if missing else format(v, ".17g")))
    return rows


TRANSACTION_HEADER = ("firm_id", "hs6", "destination", "year", "month", "value_usd", "re_export")


def write_transactions(ts: TransactionSet, path: str | Path) -> Path:
    rows = ((r.firm_id, r.product, r.destination, r.year, r.month, cents_to_str(r.value_cents), int(r.re_export))
            for r in ts.records)
    return write_table(path, TRANSACTION_HEADER, rows)


def write_pci(rows, path: str | Path) -> Path:
    return write_table(path, ("product", "year", "pci"), rows)
