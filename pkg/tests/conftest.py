import numpy as np
import pytest

from exportcore.frames import RegressionFrame
from exportcore.ingest import FirmProductPanel, TransactionRecord


def make_panel(values, country="AA", nd=None):
    """Panel from {year: {firm: {product: cents}}}; every firm gets ``nd`` destinations (default 1)."""
    dests = {t: {f: (nd or {}).get(f, 1) for f in firms} for t, firms in values.items()}
    return FirmProductPanel(values, dests, country=country)


def make_frame(outcome, numeric, labels=None, kind="test"):
    labels = {k: np.asarray([str(v) for v in vals], dtype=object) for k, vals in (labels or {}).items()}
    return RegressionFrame(kind, labels, {k: np.asarray(v, dtype=float) for k, v in numeric.items()}, outcome)


def rec(firm, product, dest="D1", year=2019, month=1, cents=100, re_export=False):
    return TransactionRecord(firm, product, dest, year, month, cents, re_export)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def planted_frame(rng, family, n, n_cov=3, n_groups=4):
    """Frame with known coefficients; one fixed-effect label column ``g``."""
    X = rng.normal(size=(n, n_cov))
    g = rng.integers(0, n_groups, n)
    beta = rng.uniform(-0.5, 0.5, n_cov)
    alpha = rng.uniform(-0.5, 0.5, n_groups)
    eta = 0.3 + X @ beta + alpha[g]
    if family == "poisson":
        y = rng.poisson(np.exp(eta)) * rng.lognormal(0.0, 0.2, n)
    elif family == "logit":
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = eta + rng.normal(0.0, 1.0, n)
    numeric = {"y": y, **{f"x{j}": X[:, j] for j in range(n_cov)}}
    return make_frame("y", numeric, {"g": [f"g{v}" for v in g]}), beta


def dense_design(frame, n_cov):
    """Intercept, dummies for every level but the first, then covariates."""
    lab = frame.labels["g"]
    levels = sorted(set(lab.tolist()))[1:]
    cols = [np.ones(frame.n)] + [(lab == lev).astype(float) for lev in levels]
    cols += [frame.numeric[f"x{j}"] for j in range(n_cov)]
    return np.column_stack(cols)


def block_contrast(network, blocks):
    """Per-product (mean within-block J) - (mean across-block J); returns (mean, standard error).

    Pairs never co-exported count as J = 0.
    """
    prods = [k for k in network.products if k in blocks]
    diffs = []
    for k in prods:
        within = [network.jaccard(k, kp) for kp in prods if kp != k and blocks[kp] == blocks[k]]
        across = [network.jaccard(k, kp) for kp in prods if blocks[kp] != blocks[k]]
        if within and across:
            diffs.append(np.mean(within) - np.mean(across))
    diffs = np.asarray(diffs)
    return float(diffs.mean()), float(diffs.std(ddof=1) / np.sqrt(len(diffs)))
