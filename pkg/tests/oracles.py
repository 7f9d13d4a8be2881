"""Independent reference implementations used as test oracles.

They share no code with the package: the metric oracle works from raw
nested dicts with Python sets and fractions, the GLM oracle runs Newton's
method in extended precision with its own elimination solver, and the OLS
oracle solves the normal equations with mpmath.
"""
from fractions import Fraction

import mpmath
import numpy as np

LD = np.longdouble


# -- metrics ---------------------------------------------------------------

def rca(x):
    """x: {firm: {product: value}} with positive values only."""
    grand = sum(v for row in x.values() for v in row.values())
    firm_tot = {f: sum(row.values()) for f, row in x.items()}
    prod_tot = {}
    for row in x.values():
        for k, v in row.items():
            prod_tot[k] = prod_tot.get(k, 0) + v
    return {(f, k): (Fraction(v) / firm_tot[f]) / (Fraction(prod_tot[k]) / grand)
            for f, row in x.items() for k, v in row.items()}


def specialized(x):
    return {key for key, r in rca(x).items() if r >= 1}


def exporter_sets(pairs):
    out = {}
    for f, k in pairs:
        out.setdefault(k, set()).add(f)
    return out


def jaccard(pairs, k, kp):
    s = exporter_sets(pairs)
    a, b = s.get(k, set()), s.get(kp, set())
    if k == kp:
        return Fraction(1)
    if not (a | b):
        return Fraction(0)
    return Fraction(len(a & b), len(a | b))


def coreness(x):
    pairs = specialized(x)
    out = {}
    for f, row in x.items():
        tot = sum(row.values())
        for k in row:
            out[(f, k)] = sum((jaccard(pairs, k, kp) * v for kp, v in row.items()), Fraction(0)) / tot
    return out


# -- estimation --------------------------------------------------------------

def _solve(A, b):
    """Gauss-Jordan elimination with partial pivoting in long double."""
    A = np.array(A, dtype=LD)
    b = np.array(b, dtype=LD)
    n = len(b)
    M = np.concatenate([A, b[:, None]], axis=1)
    for c in range(n):
        piv = c + int(np.argmax(np.abs(M[c:, c])))
        M[[c, piv]] = M[[piv, c]]
        M[c] = M[c] / M[c, c]
        for r in range(n):
            if r != c:
                M[r] = M[r] - M[r, c] * M[c]
    return M[:, n]


def _ll(family, X, y, beta):
    eta = X @ beta
    if family == "poisson":
        return np.sum(y * eta - np.exp(eta))
    return np.sum(y * eta - np.log1p(np.exp(eta)))


def newton_glm(X, y, family, iters=200):
    """Maximum likelihood by Newton's method with an exact (golden-section) line search."""
    X = np.asarray(X, dtype=LD)
    y = np.asarray(y, dtype=LD)
    beta = np.zeros(X.shape[1], dtype=LD)
    for _ in range(iters):
        eta = X @ beta
        if family == "poisson":
            mu = np.exp(eta)
            v = mu
        else:
            mu = 1 / (1 + np.exp(-eta))
            v = mu * (1 - mu)
        g = X.T @ (y - mu)
        H = X.T @ (X * v[:, None])
        d = _solve(H, g)
        # golden-section search for the step on [0, 2]
        lo, hi = LD(0), LD(2)
        phi = (np.sqrt(LD(5)) - 1) / 2
        for _ in range(80):
            a = hi - phi * (hi - lo)
            b = lo + phi * (hi - lo)
            if _ll(family, X, y, beta + a * d) > _ll(family, X, y, beta + b * d):
                hi = b
            else:
                lo = a
        step = (lo + hi) / 2
        beta = beta + step * d
        if np.max(np.abs(step * d)) < LD(1e-17) * (1 + np.max(np.abs(beta))):
            break
    return np.array(beta, dtype=float)


def ols_normal_equations(X, y, w=None, dps=50):
    with mpmath.workdps(dps):
        n, p = X.shape
        w = np.ones(n) if w is None else w
        cols = [[mpmath.mpf(float(v)) for v in X[:, j]] for j in range(p)]
        wy = [mpmath.mpf(float(a)) * mpmath.mpf(float(b)) for a, b in zip(w, y)]
        wcols = [[mpmath.mpf(float(a)) * c for a, c in zip(w, col)] for col in cols]
        A = mpmath.matrix(p, p)
        b = mpmath.matrix(p, 1)
        for i in range(p):
            b[i] = mpmath.fdot(cols[i], wy)
            for j in range(p):
                A[i, j] = mpmath.fdot(wcols[i], cols[j])
        sol = mpmath.lu_solve(A, b)
        return np.array([float(sol[i]) for i in range(p)])
