"""PPML, logit and (weighted) OLS on regression frames.

Fixed effects enter as dummy columns. The effect with the most levels, when
large, is kept as group codes and eliminated exactly inside every weighted
least-squares step; the others are dense columns. Standard errors are
heteroskedasticity-robust (HC1).
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as sla
from scipy import special, stats

from exportcore._io import fmt, write_table
from exportcore.frames import RegressionFrame


class EstimationError(RuntimeError):
    pass


class ConvergenceError(EstimationError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


class PerfectSeparationError(EstimationError):
    pass


@dataclass
class ModelSpec:
    outcome: str
    covariates: list[str] = field(default_factory=list)
    interactions: list[tuple[str, str]] = field(default_factory=list)
    fixed_effects: list[str] = field(default_factory=list)
    weights: str | None = None
    intercept: bool = True

    @classmethod
    def from_mapping(cls, m: Mapping[str, str]) -> "ModelSpec":
        def listing(key):
            return [s.strip() for s in (m.get(key) or "").replace("\n", ",").split(",") if s.strip()]
        inter = []
        for term in listing("interactions"):
            a, _, b = term.partition(":")
            if not b:
                raise ValueError(f"interaction {term!r} must look like a:b")
            inter.append((a.strip(), b.strip()))
        intercept = str(m.get("intercept", "true")).strip().lower() not in ("0", "false", "no")
        return cls(m["outcome"].strip(), listing("covariates"), inter, listing("fixed_effects"),
                   (m.get("weights") or "").strip() or None, intercept)

    @classmethod
    def from_file(cls, path: str | Path, section: str = "model") -> "ModelSpec":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not cp.read(path, encoding="utf-8"):
            raise FileNotFoundError(path)
        return cls.from_mapping(cp[section])


@dataclass
class FitResult:
    model: str
    names: list[str]
    params: np.ndarray
    bse: np.ndarray
    nobs: int
    loglik: float | None = None
    ssr: float | None = None
    r2: float | None = None
    iterations: int = 0
    grad_norm: float = 0.0
    converged: bool = True
    ridge: float = 0.0
    dropped_rows: dict[str, int] = field(default_factory=dict)
    dropped_columns: list[str] = field(default_factory=list)
    fitted: np.ndarray | None = None
    absorbed: str | None = None
    n_absorbed: int = 0

    @property
    def zvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.params / self.bse

    @property
    def pvalues(self) -> np.ndarray:
        return 2 * stats.norm.sf(np.abs(self.zvalues))

    def coef(self, name: str) -> float:
        return float(self.params[self.names.index(name)])

    def se(self, name: str) -> float:
        return float(self.bse[self.names.index(name)])

    def summary_rows(self) -> list[tuple]:
        return list(zip(self.names, self.params.tolist(), self.bse.tolist(),
                        self.zvalues.tolist(), self.pvalues.tolist()))

    def diagnostics(self) -> dict:
        d = {"model": self.model, "nobs": self.nobs, "iterations": self.iterations,
             "grad_norm": self.grad_norm, "converged": self.converged, "ridge": self.ridge,
             "dropped_columns": ";".join(self.dropped_columns)}
        if self.absorbed:
            d["absorbed"] = f"{self.absorbed}:{self.n_absorbed}"
        for k in ("loglik", "ssr", "r2"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        for k, v in sorted(self.dropped_rows.items()):
            d[f"dropped_rows.{k}"] = v
        return d


def write_fit(fit: FitResult, path: str | Path) -> Path:
    rows = [(n, b, s, z, p) for n, b, s, z, p in fit.summary_rows()]
    rows.append(("", "", "", "", ""))
    rows += [(f"# {k}", fmt(v), "", "", "") for k, v in fit.diagnostics().items()]
    return write_table(path, ("name", "estimate", "robust_se", "z", "p"), rows)


@dataclass
class Design:
    """Dense columns plus, optionally, one fixed effect held as integer group codes.

    The group dummies of the absorbed effect are eliminated exactly inside
    each weighted least-squares solve (block elimination of a diagonal
    block), so the fit is identical to the one with every dummy spelled out.
    """
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    names: list[str]
    dropped_rows: dict[str, int]
    dropped_columns: list[str]
    groups: np.ndarray | None = None
    n_groups: int = 0
    absorbed: str | None = None

    @property
    def n_params(self) -> int:
        return self.X.shape[1] + self.n_groups


def _degenerate(yy: np.ndarray, rule: str) -> bool:
    return bool(np.all(yy == 0)) if rule == "zero" else bool(np.all(yy == yy[0]))


def _drop_degenerate_groups(frame: RegressionFrame, spec: ModelSpec, rule: str | None) -> tuple[np.ndarray, dict]:
    """Rows whose outcome is fully determined by a fixed-effect group or a 0/1 covariate level.

    Such a group pushes its coefficient to infinity (all-zero outcome under
    PPML, constant outcome under logit). Its rows are dropped and counted,
    repeating until nothing changes; the emptied column then falls out of the
    design as collinear.
    """
    keep = np.ones(frame.n, dtype=bool)
    dropped: dict[str, int] = {}
    if rule is None:
        return keep, dropped
    y = frame.numeric[spec.outcome]
    tag = "all_zero" if rule == "zero" else "no_variation"
    binary = [c for c in spec.covariates if np.all(np.isin(frame.numeric[c], (0.0, 1.0)))]
    changed = True
    while changed:
        changed = False
        for fe in spec.fixed_effects:
            lab = frame.labels[fe]
            groups: dict[str, list[int]] = {}
            for i in np.flatnonzero(keep):
                groups.setdefault(lab[i], []).append(i)
            for idx in groups.values():
                if _degenerate(y[idx], rule):
                    keep[idx] = False
                    key = f"fe_{tag}:{fe}"
                    dropped[key] = dropped.get(key, 0) + len(idx)
                    changed = True
        for c in binary:
            x = frame.numeric[c]
            levels = [np.flatnonzero(keep & (x == v)) for v in (0.0, 1.0)]
            if min(len(idx) for idx in levels) == 0:
                continue  # constant column, left to the collinearity check
            for idx in levels:
                if _degenerate(y[idx], rule):
                    keep[idx] = False
                    key = f"perfect_prediction:{c}"
                    dropped[key] = dropped.get(key, 0) + len(idx)
                    changed = True
                    break
    return keep, dropped


MAX_DESIGN_CELLS = 60_000_000
ABSORB_MIN_LEVELS = 100


def _group_mean(groups: np.ndarray, n_groups: int, wt: np.ndarray, v: np.ndarray) -> np.ndarray:
    sw = np.bincount(groups, weights=wt, minlength=n_groups)
    if v.ndim == 1:
        return np.bincount(groups, weights=wt * v, minlength=n_groups) / sw
    return np.column_stack([np.bincount(groups, weights=wt * v[:, j], minlength=n_groups)
                            for j in range(v.shape[1])]).reshape(n_groups, v.shape[1]) / sw[:, None]


def _demean(d: Design, wt: np.ndarray, v: np.ndarray) -> np.ndarray:
    if d.groups is None:
        return v
    return v - _group_mean(d.groups, d.n_groups, wt, v)[d.groups]


def build_design(frame: RegressionFrame, spec: ModelSpec, degenerate: str | None = None,
                 tol: float = 1e-9, max_cells: int = MAX_DESIGN_CELLS,
                 absorb_min: int = ABSORB_MIN_LEVELS) -> Design:
    """Assemble the design: intercept, fixed-effect dummies, covariates, interactions.

    The fixed effect with the most levels is absorbed when it has at least
    ``absorb_min`` levels; it then replaces the intercept. Columns linearly
    dependent on earlier ones (or, when absorbing, constant within groups)
    are dropped and reported, so a covariate collinear with the dummies is
    the one removed.
    """
    for name in [spec.outcome, *spec.covariates, *(c for pair in spec.interactions for c in pair)]:
        if name not in frame.numeric:
            raise KeyError(f"frame has no numeric column {name!r}")
    for fe in spec.fixed_effects:
        if fe not in frame.labels:
            raise KeyError(f"frame has no label column {fe!r}")
    keep, dropped_rows = _drop_degenerate_groups(frame, spec, degenerate)
    n = int(keep.sum())
    levels = {fe: sorted(set(frame.labels[fe][keep].tolist())) for fe in spec.fixed_effects}
    absorbed = None
    if levels:
        big = max(spec.fixed_effects, key=lambda fe: len(levels[fe]))
        if len(levels[big]) >= absorb_min:
            absorbed = big
    dense_fe = [fe for fe in spec.fixed_effects if fe != absorbed]
    width = 1 + len(spec.covariates) + len(spec.interactions) + sum(len(levels[fe]) for fe in dense_fe)
    if n * width > max_cells:
        raise EstimationError(
            f"dense design would hold {n} x {width} cells (limit {max_cells}); "
            "use coarser fixed effects or a smaller sample")
    cols: list[np.ndarray] = []
    names: list[str] = []
    if spec.intercept and absorbed is None:
        cols.append(np.ones(n))
        names.append("const")
    has_base = bool(cols) or absorbed is not None
    for fe in dense_fe:
        lab = frame.labels[fe][keep]
        levs = levels[fe][1:] if has_base else levels[fe]
        has_base = True
        for lev in levs:
            cols.append((lab == lev).astype(float))
            names.append(f"{fe}[{lev}]")
    for c in spec.covariates:
        cols.append(frame.numeric[c][keep].astype(float))
        names.append(c)
    for a, b in spec.interactions:
        cols.append(frame.numeric[a][keep] * frame.numeric[b][keep])
        names.append(f"{a}:{b}")
    X = np.column_stack(cols) if cols else np.empty((n, 0))
    if not np.all(np.isfinite(X)):
        raise EstimationError("design matrix has missing or infinite values")
    groups, n_groups = None, 0
    if absorbed is not None:
        index = {lev: i for i, lev in enumerate(levels[absorbed])}
        groups = np.fromiter((index[v] for v in frame.labels[absorbed][keep]), dtype=np.int64, count=n)
        n_groups = len(index)
    y = frame.numeric[spec.outcome][keep].astype(float)
    w = frame.numeric[spec.weights][keep].astype(float) if spec.weights else np.ones(n)
    d = Design(X, y, w, names, dropped_rows, [], groups, n_groups, absorbed)
    if X.shape[1]:
        base_norms = np.linalg.norm(X, axis=0)
        Xt = _demean(d, np.ones(n), X)
        norms = np.linalg.norm(Xt, axis=0)
        live = norms > tol * np.maximum(base_norms, 1.0)
        Xs = Xt / np.where(live, norms, 1.0)
        r = np.linalg.qr(Xs, mode="r")
        diag = np.abs(np.diag(r)) if r.shape[0] >= X.shape[1] else np.concatenate(
            [np.abs(np.diag(r)), np.zeros(X.shape[1] - r.shape[0])])
        ok = (diag > tol) & live
        d.dropped_columns = [nm for nm, o in zip(names, ok) if not o]
        d.X = X[:, ok]
        d.names = [nm for nm, o in zip(names, ok) if o]
    return d


def _solve_spd(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    try:
        return sla.cho_solve(sla.cho_factor(A), b), 0.0
    except (np.linalg.LinAlgError, sla.LinAlgError):
        jitter = 1e-10 * max(np.mean(np.diag(A)), 1.0)
        return np.linalg.solve(A + jitter * np.eye(len(A)), b), jitter


def _wls(d: Design, wt: np.ndarray, z: np.ndarray):
    """Weighted least squares of z on the design; returns (beta, alpha, ridge)."""
    Xt = _demean(d, wt, d.X)
    beta, jit = _solve_spd(Xt.T @ (wt[:, None] * Xt), Xt.T @ (wt * _demean(d, wt, z)))
    if d.groups is None:
        return beta, None, jit
    alpha = _group_mean(d.groups, d.n_groups, wt, z - d.X @ beta)
    return beta, alpha, jit


def _eta(d: Design, beta: np.ndarray, alpha: np.ndarray | None) -> np.ndarray:
    eta = d.X @ beta
    return eta if alpha is None else eta + alpha[d.groups]


def _poisson_ll(y, eta, w):
    return float(np.sum(w * (y * eta - np.exp(eta) - special.gammaln(y + 1))))


def _logit_ll(y, eta, w):
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def _irls(d: Design, family: str, tol: float, max_iter: int, grad_tol: float):
    y, w = d.y, d.w
    ybar = float(np.sum(w * y) / np.sum(w))
    if family == "poisson":
        ll_fn, mean_fn = _poisson_ll, np.exp
        start = np.log(ybar)
    else:
        ll_fn, mean_fn = _logit_ll, special.expit
        start = np.log(ybar / (1 - ybar))
    # start from the intercept-only fit so that every step is likelihood-checked
    beta = np.zeros(d.X.shape[1])
    alpha = None
    if d.groups is not None:
        alpha = np.full(d.n_groups, start)
    else:
        ones = np.flatnonzero(np.all(d.X == 1.0, axis=0))
        if len(ones):
            beta[ones[0]] = start
    eta = _eta(d, beta, alpha)
    mu = mean_fn(eta)
    ll_old = ll_fn(y, eta, w)
    trace: list[dict] = []
    ridge = 0.0
    for it in range(1, max_iter + 1):
        var = mu if family == "poisson" else mu * (1 - mu)
        wt = w * var
        z = eta + (y - mu) / var
        new_b, new_a, jit = _wls(d, wt, z)
        ridge = max(ridge, jit)
        # step-halving while the pseudo-likelihood goes down
        step = 1.0
        for _ in range(40):
            cand_b = beta + step * (new_b - beta)
            cand_a = None if alpha is None else alpha + step * (new_a - alpha)
            eta_c = _eta(d, cand_b, cand_a)
            if family == "poisson" and np.max(eta_c) > 700:
                ll_c = -np.inf
            else:
                ll_c = ll_fn(y, eta_c, w)
            if ll_c >= ll_old - 1e-12 * abs(ll_old):
                break
            step /= 2
        old = beta if alpha is None else np.concatenate([beta, alpha])
        cand = cand_b if cand_a is None else np.concatenate([cand_b, cand_a])
        delta = np.max(np.abs(cand - old)) / (1 + np.max(np.abs(cand))) if len(cand) else 0.0
        beta, alpha, eta, ll_old = cand_b, cand_a, eta_c, ll_c
        mu = mean_fn(eta)
        if family == "logit" and np.max(np.abs(eta)) > 35:
            raise PerfectSeparationError(
                "fitted probabilities reach 0 or 1; the outcome is (quasi-)perfectly separated")
        resid = w * (y - mu)
        grad = d.X.T @ resid
        if d.groups is not None:
            grad = np.concatenate([grad, np.bincount(d.groups, weights=resid, minlength=d.n_groups)])
        gnorm = float(np.linalg.norm(grad))
        trace.append({"iteration": it, "loglik": ll_c, "delta": float(delta), "grad_norm": gnorm, "step": step})
        if delta < tol and gnorm <= grad_tol * (1 + abs(ll_c)):
            return beta, mu, ll_c, it, gnorm, ridge, trace
    raise ConvergenceError(f"{family} IRLS did not converge in {max_iter} iterations", trace)


def _sandwich(d: Design, wt: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """HC1 standard errors of the dense coefficients.

    With an absorbed effect the relevant rows of the inverse Hessian reduce
    to the within-group demeaned columns, so bread and scores use those.
    """
    Xt = _demean(d, wt, d.X)
    Hinv = np.linalg.inv(Xt.T @ (wt[:, None] * Xt))
    scores = Xt * resid[:, None]
    n, k = len(d.y), d.n_params
    V = Hinv @ (scores.T @ scores) @ Hinv * (n / (n - k))
    return np.sqrt(np.clip(np.diag(V), 0, None))


def _glm_fit(frame: RegressionFrame, spec: ModelSpec, family: str, tol: float, max_iter: int,
             grad_tol: float, absorb_min: int) -> FitResult:
    d = build_design(frame, spec, degenerate="zero" if family == "poisson" else "constant",
                     absorb_min=absorb_min)
    n, k = len(d.y), d.n_params
    if n <= k:
        raise EstimationError(f"{n} observations for {k} parameters")
    if family == "poisson" and np.any(d.y < 0):
        raise EstimationError("PPML needs a non-negative outcome")
    if family == "logit" and not np.all((d.y == 0) | (d.y == 1)):
        raise EstimationError("logit needs a 0/1 outcome")
    beta, mu, ll, it, gnorm, ridge, _ = _irls(d, family, tol, max_iter, grad_tol)
    var = mu if family == "poisson" else mu * (1 - mu)
    bse = _sandwich(d, d.w * var, d.w * (d.y - mu))
    return FitResult(family, d.names, beta, bse, n, loglik=ll, iterations=it, grad_norm=gnorm,
                     ridge=ridge, dropped_rows=d.dropped_rows, dropped_columns=d.dropped_columns,
                     fitted=mu, absorbed=d.absorbed, n_absorbed=d.n_groups)


def ppml_fit(frame: RegressionFrame, spec: ModelSpec, tol: float = 1e-9, max_iter: int = 100,
             grad_tol: float = 1e-8, absorb_min: int = ABSORB_MIN_LEVELS) -> FitResult:
    """Poisson pseudo-maximum likelihood with mean exp(X b), fitted by IRLS."""
    return _glm_fit(frame, spec, "poisson", tol, max_iter, grad_tol, absorb_min)


def logit_fit(frame: RegressionFrame, spec: ModelSpec, tol: float = 1e-9, max_iter: int = 100,
              grad_tol: float = 1e-8, absorb_min: int = ABSORB_MIN_LEVELS) -> FitResult:
    return _glm_fit(frame, spec, "logit", tol, max_iter, grad_tol, absorb_min)


def ols_fit(frame: RegressionFrame, spec: ModelSpec, absorb_min: int = ABSORB_MIN_LEVELS) -> FitResult:
    """(Weighted) least squares with HC1 standard errors and R-squared."""
    d = build_design(frame, spec, absorb_min=absorb_min)
    n, k = len(d.y), d.n_params
    if n <= k:
        raise EstimationError(f"{n} observations for {k} parameters")
    sw = np.sqrt(d.w)
    Xt = _demean(d, d.w, d.X)
    yt = _demean(d, d.w, d.y)
    beta, *_ = np.linalg.lstsq(Xt * sw[:, None], yt * sw, rcond=None)
    fitted = d.y - (yt - Xt @ beta)
    resid = d.y - fitted
    ssr = float(np.sum(d.w * resid**2))
    ybar = np.sum(d.w * d.y) / np.sum(d.w) if (spec.intercept or d.groups is not None) else 0.0
    sst = float(np.sum(d.w * (d.y - ybar) ** 2))
    r2 = 1 - ssr / sst if sst > 0 else (1.0 if ssr == 0 else 0.0)
    bse = _sandwich(d, d.w, d.w * resid)
    grad = float(np.linalg.norm(Xt.T @ (d.w * resid)))
    return FitResult("ols", d.names, beta, bse, n, ssr=ssr, r2=r2, iterations=1, grad_norm=grad,
                     dropped_rows=d.dropped_rows, dropped_columns=d.dropped_columns, fitted=fitted,
                     absorbed=d.absorbed, n_absorbed=d.n_groups)


ESTIMATORS = {"ppml": ppml_fit, "logit": logit_fit, "ols": ols_fit}


def fit(frame: RegressionFrame, spec: ModelSpec, model: str, **options) -> FitResult:
    if model not in ESTIMATORS:
        raise ValueError(f"unknown model {model!r}; choose from {sorted(ESTIMATORS)}")
    return ESTIMATORS[model](frame, spec, **options)
