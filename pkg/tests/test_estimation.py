import math

import numpy as np
import pytest

from exportcore import estimation
from exportcore.estimation import (ConvergenceError, EstimationError, ModelSpec, PerfectSeparationError,
                                   build_design, fit, logit_fit, ols_fit, ppml_fit)

import oracles
from conftest import dense_design, make_frame, planted_frame

FAMILY = {"ppml": "poisson", "logit": "logit", "ols": "ols"}


def spec(n_cov=3, fe=("g",)):
    return ModelSpec("y", [f"x{j}" for j in range(n_cov)], [], list(fe))


def score(X, y, mu):
    return float(np.linalg.norm(X.T @ (y - mu)))


def test_poisson_intercept_only():
    fr = make_frame("y", {"y": [1, 2, 3]})
    res = ppml_fit(fr, ModelSpec("y"))
    assert abs(res.params[0] - math.log(2)) <= 1e-10


def test_logit_intercept_only():
    assert abs(logit_fit(make_frame("y", {"y": [0, 1, 0, 1]}), ModelSpec("y")).params[0]) <= 1e-10
    res = logit_fit(make_frame("y", {"y": [1, 1, 1, 0]}), ModelSpec("y"))
    assert abs(res.params[0] - math.log(3)) <= 1e-10


@pytest.mark.parametrize("model", ["ppml", "logit"])
@pytest.mark.parametrize("n", [200, 1000])
def test_glm_matches_newton_oracle(model, n):
    rng = np.random.default_rng(n + len(model))
    fr, _ = planted_frame(rng, FAMILY[model], n)
    res = fit(fr, spec(), model)
    X = dense_design(fr, 3)
    ref = oracles.newton_glm(X, fr.numeric["y"], FAMILY[model])
    assert np.max(np.abs(res.params - ref)) <= 1e-6
    assert res.converged and res.grad_norm <= 1e-8
    mu = np.exp(X @ res.params) if model == "ppml" else 1 / (1 + np.exp(-(X @ res.params)))
    assert score(X, fr.numeric["y"], mu) <= 1e-8


def test_ols_matches_normal_equations():
    rng = np.random.default_rng(5)
    fr, _ = planted_frame(rng, "ols", 500)
    res = ols_fit(fr, spec())
    ref = oracles.ols_normal_equations(dense_design(fr, 3), fr.numeric["y"])
    assert np.max(np.abs(res.params - ref)) <= 1e-10


def test_weighted_ols_matches_normal_equations():
    rng = np.random.default_rng(6)
    fr, _ = planted_frame(rng, "ols", 300)
    fr.numeric["w"] = rng.uniform(0.5, 2.0, fr.n)
    s = spec()
    s.weights = "w"
    res = ols_fit(fr, s)
    ref = oracles.ols_normal_equations(dense_design(fr, 3), fr.numeric["y"], fr.numeric["w"])
    assert np.max(np.abs(res.params - ref)) <= 1e-10


def test_ols_exact_and_constant():
    x = np.arange(10.0)
    res = ols_fit(make_frame("y", {"y": 2 * x, "x": x}), ModelSpec("y", ["x"]))
    assert res.coef("x") == pytest.approx(2.0, abs=1e-12) and res.r2 == pytest.approx(1.0)
    flat = ols_fit(make_frame("y", {"y": np.full(10, 3.0), "x": x}), ModelSpec("y", ["x"]))
    assert flat.coef("x") == pytest.approx(0.0, abs=1e-12)


def test_robust_close_to_classical_under_homoskedasticity():
    rng = np.random.default_rng(11)
    n = 10_000
    x = rng.normal(size=n)
    y = 1 + 2 * x + rng.normal(size=n)
    res = ols_fit(make_frame("y", {"y": y, "x": x}), ModelSpec("y", ["x"]))
    X = np.column_stack([np.ones(n), x])
    resid = y - X @ res.params
    classical = np.sqrt(np.diag(np.linalg.inv(X.T @ X)) * (resid @ resid) / (n - 2))
    assert np.all(np.abs(res.bse / classical - 1) < 0.10)


def test_invariant_to_row_order():
    rng = np.random.default_rng(8)
    fr, _ = planted_frame(rng, "poisson", 400)
    perm = rng.permutation(fr.n)
    a = ppml_fit(fr, spec())
    b = ppml_fit(fr.take(perm), spec())
    assert np.allclose(a.params, b.params, rtol=0, atol=1e-9)


def test_collinear_covariate_dropped_without_changing_fit():
    rng = np.random.default_rng(9)
    fr, _ = planted_frame(rng, "poisson", 400)
    # a covariate that is a linear combination of the group dummies
    fr.numeric["gdup"] = np.array([float(s == "g1") * 2 + 1 for s in fr.labels["g"]])
    base = ppml_fit(fr, spec())
    s = spec()
    s.covariates.append("gdup")
    res = ppml_fit(fr, s)
    assert res.dropped_columns == ["gdup"]
    assert abs(res.loglik - base.loglik) <= 1e-8
    assert np.allclose(res.fitted, base.fitted, rtol=1e-8)


def test_all_zero_group_dropped():
    rng = np.random.default_rng(10)
    fr, _ = planted_frame(rng, "poisson", 300)
    fr.numeric["y"][fr.labels["g"] == "g2"] = 0.0
    res = ppml_fit(fr, spec())
    n2 = int(np.sum(fr.labels["g"] == "g2"))
    assert res.dropped_rows == {"fe_all_zero:g": n2} and res.nobs == fr.n - n2
    assert "g[g2]" not in res.names


def test_logit_constant_group_dropped():
    rng = np.random.default_rng(12)
    fr, _ = planted_frame(rng, "logit", 400)
    fr.numeric["y"][fr.labels["g"] == "g3"] = 1.0
    res = logit_fit(fr, spec())
    assert res.dropped_rows == {"fe_no_variation:g": int(np.sum(fr.labels["g"] == "g3"))}


def test_perfect_separation():
    x = np.linspace(-1, 1, 40)
    fr = make_frame("y", {"y": (x > 0).astype(float), "x": x})
    with pytest.raises(PerfectSeparationError):
        logit_fit(fr, ModelSpec("y", ["x"]))


def test_non_convergence_carries_trace():
    rng = np.random.default_rng(13)
    fr, _ = planted_frame(rng, "poisson", 200)
    with pytest.raises(ConvergenceError) as err:
        ppml_fit(fr, spec(), max_iter=1)
    assert len(err.value.trace) == 1 and "grad_norm" in err.value.trace[0]


def test_bad_inputs():
    fr = make_frame("y", {"y": [-1.0, 2.0, 3.0]})
    with pytest.raises(EstimationError):
        ppml_fit(fr, ModelSpec("y"))
    with pytest.raises(EstimationError):
        logit_fit(make_frame("y", {"y": [0.5, 1.0, 0.0]}), ModelSpec("y"))
    with pytest.raises(KeyError):
        ppml_fit(make_frame("y", {"y": [1.0, 2.0]}), ModelSpec("y", ["nope"]))
    with pytest.raises(ValueError):
        fit(make_frame("y", {"y": [1.0, 2.0]}), ModelSpec("y"), "probit")


def test_design_size_guard():
    labels = {"g": [str(i) for i in range(200)]}
    fr = make_frame("y", {"y": np.ones(200)}, labels)
    with pytest.raises(EstimationError, match="dense design"):
        build_design(fr, ModelSpec("y", [], [], ["g"]), max_cells=1000, absorb_min=10**9)


def test_interactions_and_spec_file(tmp_path):
    rng = np.random.default_rng(14)
    fr, _ = planted_frame(rng, "ols", 300)
    path = tmp_path / "spec.ini"
    path.write_text("[model]\noutcome = y\ncovariates = x0, x1\ninteractions = x0:x1\nfixed_effects = g\n")
    s = ModelSpec.from_file(path)
    res = ols_fit(fr, s)
    assert "x0:x1" in res.names and res.names[0] == "const"


def test_write_fit(tmp_path):
    rng = np.random.default_rng(15)
    fr, _ = planted_frame(rng, "poisson", 200)
    res = ppml_fit(fr, spec())
    estimation.write_fit(res, tmp_path / "fit.csv")
    text = (tmp_path / "fit.csv").read_text()
    assert text.startswith("name,estimate,robust_se,z,p\nconst,")
    assert "# grad_norm" in text and "# nobs,200" in text


@pytest.mark.parametrize("model", ["ppml", "logit", "ols"])
def test_absorbed_effect_matches_dense_dummies(model):
    rng = np.random.default_rng(21)
    fr, _ = planted_frame(rng, FAMILY[model], 1500, n_groups=60)
    fr.labels["h"] = np.array([f"h{v}" for v in rng.integers(0, 3, fr.n)], dtype=object)
    s = spec(fe=("g", "h"))
    dense = fit(fr, s, model, absorb_min=10**9)
    absorbed = fit(fr, s, model, absorb_min=10)
    assert absorbed.absorbed == "g" and absorbed.n_absorbed == 60
    for name in ["h[h1]", "h[h2]", "x0", "x1", "x2"]:
        assert absorbed.coef(name) == pytest.approx(dense.coef(name), abs=1e-8)
        assert absorbed.se(name) == pytest.approx(dense.se(name), rel=1e-6)
    assert np.allclose(absorbed.fitted, dense.fitted, rtol=1e-8)
    if model != "ols":
        assert absorbed.loglik == pytest.approx(dense.loglik, abs=1e-8)
        assert absorbed.grad_norm <= 1e-8
    else:
        assert absorbed.r2 == pytest.approx(dense.r2, abs=1e-12)


def test_absorbed_collinear_covariate_dropped():
    rng = np.random.default_rng(22)
    fr, _ = planted_frame(rng, "poisson", 800, n_groups=50)
    fr.numeric["gconst"] = np.array([float(s[1:]) for s in fr.labels["g"]])
    s = spec()
    s.covariates.append("gconst")
    res = ppml_fit(fr, s, absorb_min=10)
    assert res.dropped_columns == ["gconst"]


def test_perfectly_predicting_dummy_rows_dropped():
    rng = np.random.default_rng(23)
    fr, _ = planted_frame(rng, "logit", 600)
    flag = (rng.random(fr.n) < 0.1).astype(float)
    fr.numeric["flag"] = flag
    fr.numeric["y"][flag == 1] = 1.0
    s = spec()
    s.covariates.append("flag")
    res = logit_fit(fr, s)
    assert res.dropped_rows == {"perfect_prediction:flag": int(flag.sum())}
    assert "flag" in res.dropped_columns and res.nobs == fr.n - int(flag.sum())
