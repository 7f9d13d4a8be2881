import json
import subprocess
import sys

import pytest

from exportcore.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "synth.ini").write_text("[synth]\nseed = 5\nn_firms = 300\nyears = 2018, 2019, 2020\n")
    assert run("synth", "--config", d / "synth.ini", "--out", d / "tx.csv", "--pci-out", d / "pci.csv") == 0
    assert run("--threads", 2, "ingest", "--input", d / "tx.csv", "--country", "SY", "--out", d / "ingest") == 0
    return d


def test_stepwise_subcommands(workdir, capsys):
    d = workdir
    panel = d / "ingest" / "panel.csv"
    for y in (2018, 2019):
        assert run("proximity", "--panel", panel, "--year", y, "--out", d / f"network_{y}.csv") == 0
        assert run("coreness", "--panel", panel, "--network", d / f"network_{y}.csv", "--year", y,
                   "--out", d / f"coreness_{y}.csv") == 0
    assert run("basket", "--panel", panel, "--years", "2018,2019", "--out", d / "basket",
               "--transactions", d / "tx.csv") == 0
    assert (d / "basket" / "binned_fit.csv").exists() and (d / "basket" / "tpv_2018.csv").exists()
    assert run("complexity", "--pci", d / "pci.csv", "--panel", panel, "--out", d / "cx.csv") == 0
    tpv = [d / "ingest" / f"tpv_{y}.csv" for y in (2018, 2019)]
    assert run("frames", "--kind", "logit", "--panel", panel, "--coreness-dir", d, "--tpv", *tpv,
               "--complexity", d / "cx.csv", "--complexity-table", "--years", "2019,2020",
               "--out", d / "logit.csv") == 0
    (d / "spec.ini").write_text("[model]\noutcome = exported\ncovariates = coreness_lag, complexity\n"
                                "fixed_effects = hs2_year\n")
    capsys.readouterr()
    assert run("estimate", "--frame", d / "logit.csv", "--model", "logit", "--spec", d / "spec.ini",
               "--out", d / "fit.csv") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["nobs"] > 0 and "coreness_lag" in out["coefficients"]


def test_ingest_outputs(workdir):
    m = json.loads((workdir / "ingest" / "manifest.json").read_text())
    assert m["records"] > 0 and m["re_exports_removed"] > 0
    assert (workdir / "ingest" / "diversification_2019.csv").exists()


def test_error_block_and_exit_code(workdir, capsys):
    assert run("proximity", "--panel", workdir / "ingest" / "panel.csv", "--year", 1999, "--out", workdir / "x.csv") == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["command"] == "proximity" and "1999" in err["error"]["message"]


def test_run_missing_pci(tmp_path, capsys):
    (tmp_path / "tx.csv").write_text("firm_id,hs6,destination,year,month,value_usd,re_export\n")
    (tmp_path / "c.ini").write_text("[run]\nout = o\nyears = 2018\n[inputs]\nAA = tx.csv\n"
                                    "[complexity]\npci = gone.csv\n")
    assert run("run", "--config", tmp_path / "c.ini") == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "ValidationError" and "gone.csv" in err["error"]["message"]


def test_run_flags_override_config(tmp_path):
    (tmp_path / "c.ini").write_text("[run]\nout = a\nyears = 2018-2019\nquartile_splits = no\n[stages]\n"
                                    "estimate = no\n[synth]\nn_firms = 120\nyears = 2018, 2019\n")
    assert run("--threads", 4, "run", "--config", tmp_path / "c.ini", "--out", tmp_path / "b") == 0
    assert (tmp_path / "b" / "manifest.json").exists() and not (tmp_path / "a").exists()


def test_module_entry_point_usage_error():
    proc = subprocess.run([sys.executable, "-m", "exportcore", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2
