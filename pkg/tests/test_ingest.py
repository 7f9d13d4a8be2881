import io
import random

import pytest

from exportcore import ingest
from exportcore.ingest import (ConfigError, InsufficientDataError, TransactionSet, aggregate_panel,
                               diversification_table, filter_re_exports, firm_summaries,
                               parse_transactions, parse_value_cents, size_quartile_table)

from conftest import make_panel, rec

HEADER = "firm_id,hs6,destination,year,month,value_usd,re_export\n"


def parse(body, **kw):
    return parse_transactions(io.StringIO(HEADER + body), **kw)


def test_single_valid_row():
    ts = parse("F1,010101,FR,2019,3,12.50,0\n")
    assert len(ts) == 1 and ts.rejects == ()
    assert ts.records[0].value_cents == 1250


def test_month_out_of_range_rejected():
    ts = parse("F1,010101,FR,2019,13,12.50,0\n")
    assert len(ts) == 0
    assert [r.reason for r in ts.rejects] == ["month out of range"]
    assert ts.rejects[0].line == 2


def test_row_errors_carry_line_numbers():
    ts = parse("F1,010101,FR,2019,1,1,0\nF1,01010,FR,2019,1,1,0\nF1,010101,FR,2019,1,abc,0\n"
               "F1,010101,FR,2019,1,-3,0\nF1,010101,FR\n")
    assert len(ts) == 1
    assert [(r.line, r.reason) for r in ts.rejects] == [
        (3, "product is not a 6-digit HS code"), (4, "unparseable value"), (5, "negative value"),
        (6, "expected 7 fields, got 3")]


def test_missing_column_is_config_error():
    with pytest.raises(ConfigError, match="value_usd"):
        parse_transactions(io.StringIO("firm_id,hs6,destination,year,month\nF1,010101,FR,2019,1\n"))


def test_schema_mapping_and_delimiter():
    text = "firm;code;dest;yr;mo;val;rx\nF1;020202;US;2020;5;3.5;no\n"
    schema = {"firm_id": "firm", "product": "code", "destination": "dest", "year": "yr",
              "month": "mo", "value": "val", "re_export": "rx"}
    ts = parse_transactions(io.StringIO(text), schema, delimiter=";")
    assert ts.records[0].product == "020202" and ts.records[0].value_cents == 350


def test_value_parsing_is_exact_in_cents():
    assert parse_value_cents("0.1") + parse_value_cents("0.2") == parse_value_cents("0.3")
    assert parse_value_cents("2.005") == 200   # half-even
    assert parse_value_cents("2.015") == 202


def test_ten_row_fixture_with_two_re_exports():
    body = "".join(f"F{i % 3},0{i}0101,FR,2019,{i + 1},10,{1 if i in (2, 7) else 0}\n" for i in range(10))
    ts = parse(body)
    assert len(ts) == 10 and ts.n_re_export == 2
    assert [r.re_export for r in ts.records].count(True) == 2


def test_filter_re_exports():
    keep = [rec("A", "010101", cents=i + 1) for i in range(7)]
    drop = [rec("A", "010101", cents=1, re_export=True) for _ in range(3)]
    assert filter_re_exports(TransactionSet(tuple(keep))).records == tuple(keep)
    assert len(filter_re_exports(TransactionSet(tuple(drop)))) == 0
    mixed = filter_re_exports(TransactionSet(tuple(keep + drop)))
    assert len(mixed) == 7 and mixed.removed_re_exports == 3


def test_aggregate_refuses_unfiltered_re_exports():
    with pytest.raises(ValueError):
        aggregate_panel(TransactionSet((rec("A", "010101", re_export=True),)))


def test_annual_and_quarterly_aggregation():
    ts = TransactionSet((rec("A", "010101", month=1, cents=5000), rec("A", "010101", month=7, cents=5000)))
    annual = aggregate_panel(ts)
    assert list(annual.entries()) == [("A", "010101", 2019, 10000)]
    q = aggregate_panel(ts, "quarterly")
    assert list(q.entries()) == [("A", "010101", 20191, 5000), ("A", "010101", 20193, 5000)]


def test_empty_input_gives_empty_panel():
    p = aggregate_panel(TransactionSet())
    assert len(p) == 0 and p.periods == ()


def test_marginals_match_second_pass(rng):
    recs = [rec(f"F{rng.integers(3)}", f"0{rng.integers(4)}0000", f"D{rng.integers(5)}",
                int(rng.choice([2018, 2019])), int(rng.integers(1, 13)), int(rng.integers(1, 10**6)))
            for _ in range(300)]
    panel = aggregate_panel(TransactionSet(tuple(recs)))
    for t in (2018, 2019):
        tot, prods, dests = {}, {}, {}
        for r in recs:
            if r.year == t:
                tot[r.firm_id] = tot.get(r.firm_id, 0) + r.value_cents
                prods.setdefault(r.firm_id, set()).add(r.product)
                dests.setdefault(r.firm_id, set()).add(r.destination)
        for f, m in panel.firm_marginals(t).items():
            assert (m.total_cents, m.np, m.nd) == (tot[f], len(prods[f]), len(dests[f]))
        ptot = {}
        for r in recs:
            if r.year == t:
                ptot[r.product] = ptot.get(r.product, 0) + r.value_cents
        assert {k: m.total_cents for k, m in panel.product_marginals(t).items()} == ptot


def test_aggregation_is_permutation_and_thread_invariant(rng):
    recs = [rec(f"F{rng.integers(20)}", f"{rng.integers(10, 99)}0000", f"D{rng.integers(5)}",
                2019, int(rng.integers(1, 13)), int(rng.integers(1, 10**9))) for _ in range(2000)]
    base = aggregate_panel(TransactionSet(tuple(recs)))
    shuffled = list(recs)
    random.Random(3).shuffle(shuffled)
    for threads in (1, 4, 8):
        assert aggregate_panel(TransactionSet(tuple(shuffled)), threads=threads) == base


def test_quarterly_series():
    assert ingest.quarterly_aggregates(TransactionSet()) == []
    one = ingest.quarterly_aggregates(TransactionSet((rec("A", "010101", cents=700),)))
    assert [(q.total_cents, q.exporters, q.firm_products) for q in one] == [(700, 1, 1)]
    ts = TransactionSet((rec("A", "010101", month=4), rec("A", "020202", month=5), rec("B", "010101", month=1)))
    rows = {q.quarter: q for q in ingest.quarterly_aggregates(ts)}
    assert (rows[2].firm_products, rows[2].exporters) == (2, 1)


def test_diversification_two_single_product_firms():
    p = make_panel({2019: {"A": {"010101": 5}, "B": {"020202": 7}}})
    rows = {r.level: r for r in diversification_table(p, 2019)}
    assert rows["1"].firm_share == 100.0 and rows["1"].export_share == 100.0


def test_diversification_hand_tally():
    nps = [1, 1, 2, 3, 4, 5, 7, 10, 11, 30]
    values = {2019: {f"F{i}": {f"{10 + j:02d}0000": 100 for j in range(n)} for i, n in enumerate(nps)}}
    rows = {r.level: r for r in diversification_table(make_panel(values), 2019)}
    assert {lvl: r.n_firms for lvl, r in rows.items()} == {"1": 2, "2": 1, "3": 1, "4": 1, "5-10": 3, ">10": 2}
    assert sum(r.firm_share for r in rows.values()) == pytest.approx(100.0, abs=1e-9)
    assert rows[">10"].export_share == pytest.approx(100 * 41 / sum(nps))


def test_diversification_requires_year():
    with pytest.raises(KeyError):
        diversification_table(make_panel({2019: {"A": {"010101": 1}}}), 2020)


def _sized_panel(sizes):
    return make_panel({2019: {f"F{i}": {"010101": s} for i, s in enumerate(sizes)}})


def test_size_quartiles_forced_order():
    import math
    sizes = [round(100 * math.exp(v)) for v in (1, 2, 3, 4)]
    s = firm_summaries(_sized_panel(sizes), 2019)
    assert [x.size_quartile for x in s] == [1, 2, 3, 4]


def test_size_quartiles_ties_go_low():
    s = firm_summaries(_sized_panel([500] * 6), 2019)
    assert {x.size_quartile for x in s} == {1}
    rows = size_quartile_table(s)
    assert rows[0].n_firms == 6 and all(r.n_firms == 0 for r in rows[1:])


def test_size_quartile_means_eight_firms():
    sizes = [100, 200, 1000, 2000, 10000, 20000, 100000, 200000]
    rows = size_quartile_table(firm_summaries(_sized_panel(sizes), 2019))
    assert [r.n_firms for r in rows] == [2, 2, 2, 2]
    assert [r.mean_exports for r in rows] == pytest.approx([1.5, 15, 150, 1500])


def test_size_quartiles_need_four_firms():
    with pytest.raises(InsufficientDataError, match="insufficient population for quartiles"):
        size_quartile_table(firm_summaries(_sized_panel([1, 2, 3]), 2019))


def test_panel_roundtrip(tmp_path, rng):
    recs = [rec(f"F{rng.integers(5)}", f"{rng.integers(10, 20)}0000", f"D{rng.integers(3)}", 2019,
                1, int(rng.integers(1, 10**7))) for _ in range(100)]
    panel = aggregate_panel(TransactionSet(tuple(recs), "AA"))
    ingest.write_panel(panel, tmp_path / "p.csv")
    assert ingest.read_panel(tmp_path / "p.csv") == panel


def test_read_transactions_glob(tmp_path):
    (tmp_path / "b.csv").write_text(HEADER + "F2,010101,FR,2019,1,1,0\n")
    (tmp_path / "a.csv").write_text(HEADER + "F1,010101,FR,2019,1,1,0\n")
    ts = ingest.read_transactions(str(tmp_path / "*.csv"), country="AA")
    assert [r.firm_id for r in ts.records] == ["F1", "F2"]
    with pytest.raises(ConfigError):
        ingest.read_transactions(str(tmp_path / "*.tsv"))
