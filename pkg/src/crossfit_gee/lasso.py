"""L1-penalized least squares by cyclic coordinate descent.

The objective is ``(1/n) ||y - X b||^2 + lam ||b||_1`` with no intercept,
so the stationarity condition reads ``|(2/n) x_j'(y - X b)| <= lam`` with
equality (and matching sign) wherever ``b_j != 0``.

All solvers work on the Gram form ``G = X'X/n``, ``c = X'y/n``, which lets
the screening step reuse one Gram matrix for all ``p`` node-wise fits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


@dataclass(frozen=True)
class LassoProblem:
    design: np.ndarray
    response: np.ndarray
    lam: float
    tol: float = 1e-10
    max_sweeps: int = 10_000

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.design, dtype=float))
        y = np.asarray(self.response, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"design has {X.shape[0]} rows, response {y.shape[0]}")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("empty design")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and nonnegative")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "response", y)


@dataclass(frozen=True)
class LassoSolution:
    coef: np.ndarray
    objective: float
    kkt_violation: float
    sweeps_used: int
    converged: bool
    history: np.ndarray  # objective after each sweep


@njit(cache=True)
def _kkt(G, c, Gb, b, lam):
    worst = 0.0
    for j in range(b.size):
        if G[j, j] <= 0.0:
            continue
        g = 2.0 * (Gb[j] - c[j])
        if b[j] > 0.0:
            v = abs(g + lam)
        elif b[j] < 0.0:
            v = abs(g - lam)
        else:
            v = max(abs(g) - lam, 0.0)
        if v > worst:
            worst = v
    return worst


@njit(cache=True)
def _objective(G, c, yy, b, Gb, lam):
    return yy - 2.0 * np.dot(c, b) + np.dot(b, Gb) + lam * np.sum(np.abs(b))


@njit(cache=True)
def _cd(G, c, yy, lam, b, tol, max_sweeps, history):
    d = b.size
    Gb = G @ b
    half = 0.5 * lam
    sweeps = 0
    kkt = _kkt(G, c, Gb, b, lam)
    while kkt > tol and sweeps < max_sweeps:
        for j in range(d):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            r = c[j] - Gb[j] + gjj * b[j]
            if r > half:
                new = (r - half) / gjj
            elif r < -half:
                new = (r + half) / gjj
            else:
                new = 0.0
            delta = new - b[j]
            if delta != 0.0:
                b[j] = new
                for k in range(d):
                    Gb[k] += G[k, j] * delta
        if sweeps < history.size:
            history[sweeps] = _objective(G, c, yy, b, Gb, lam)
        sweeps += 1
        kkt = _kkt(G, c, Gb, b, lam)
    return sweeps, kkt


@njit(cache=True)
def _path(G, c, yy, lambdas, tol, max_sweeps):
    d = c.size
    nl = lambdas.size
    coefs = np.zeros((nl, d))
    rss = np.zeros(nl)
    kkts = np.zeros(nl)
    b = np.zeros(d)
    empty = np.zeros(0)
    for i in range(nl):
        _, kkt = _cd(G, c, yy, lambdas[i], b, tol, max_sweeps, empty)
        coefs[i] = b
        rss[i] = yy - 2.0 * np.dot(c, b) + np.dot(b, G @ b)
        kkts[i] = kkt
    return coefs, rss, kkts


def solve_lasso(problem: LassoProblem, init=None) -> LassoSolution:
    """Minimise ``(1/n)||y - Xb||^2 + lam ||b||_1`` by cyclic coordinate descent.

    Non-convergence within ``max_sweeps`` is reported through
    ``converged=False`` rather than raised.
    """
    X, y = problem.design, problem.response
    n, d = X.shape
    G = X.T @ X / n
    c = X.T @ y / n
    yy = float(y @ y / n)
    b = np.zeros(d) if init is None else np.array(init, dtype=float)
    history = np.full(min(problem.max_sweeps, 100_000), np.nan)
    sweeps, kkt = _cd(G, c, yy, float(problem.lam), b, problem.tol,
                      problem.max_sweeps, history)
    obj = float(np.mean((y - X @ b) ** 2) + problem.lam * np.abs(b).sum())
    return LassoSolution(
        coef=b,
        objective=obj,
        kkt_violation=float(kkt),
        sweeps_used=int(sweeps),
        converged=bool(kkt <= problem.tol),
        history=history[:sweeps].copy(),
    )


def lambda_max(G_or_c, c=None) -> float:
    """Smallest ``lam`` for which the zero vector is optimal."""
    c = G_or_c if c is None else c
    return 2.0 * float(np.max(np.abs(c))) if np.size(c) else 0.0


def lambda_grid(lam_max: float, n_lambda: int = 50, ratio: float = 1e-3) -> np.ndarray:
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(lam_max, lam_max * ratio, n_lambda)


@dataclass(frozen=True)
class LassoPathFit:
    coef: np.ndarray
    lam: float
    lambdas: np.ndarray
    bic: np.ndarray
    kkt_violation: float


def lasso_bic_gram(G, c, yy, n, lambdas=None, n_lambda=50, tol=1e-8,
                   max_sweeps=10_000) -> LassoPathFit:
    """Path fit on the Gram form with BIC ``n log(RSS/n) + df log n`` selection."""
    G = np.ascontiguousarray(G, dtype=float)
    c = np.ascontiguousarray(c, dtype=float)
    if lambdas is None:
        ratio = 1e-3 if n > c.size else 1e-2
        lambdas = lambda_grid(lambda_max(c), n_lambda, ratio)
    lambdas = np.ascontiguousarray(lambdas, dtype=float)
    coefs, rss, kkts = _path(G, c, float(yy), lambdas, tol, max_sweeps)
    df = np.count_nonzero(coefs, axis=1)
    floor = 1e-12 * max(float(yy), 1e-300)
    bic = n * np.log(np.maximum(rss, floor)) + df * np.log(n)
    best = int(np.argmin(bic))
    return LassoPathFit(coefs[best], float(lambdas[best]), lambdas, bic, float(kkts[best]))


def lasso_bic(design, response, lambdas=None, n_lambda=50, **kw) -> LassoPathFit:
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    n = X.shape[0]
    return lasso_bic_gram(X.T @ X / n, X.T @ y / n, y @ y / n, n, lambdas, n_lambda, **kw)
