"""Decorrelated score screening of the covariance active set.

For each measurement ``k`` the squared residuals are passed through basis
functions ``f_v``, regressed (lasso) on the covariates, and each covariate
``j`` is tested with a score statistic built from

    S_ikj^v = (X_ikj - X_ik,-j' gamma_kj) (f_v(R_ik^2) - X_ik,-j' theta_k,-j^v).

Under the null ``W_kj`` is approximately chi-square with ``h`` degrees of
freedom; covariates exceeding a Bonferroni-type critical value are kept.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .lasso import lasso_bic_gram
from .model import Dataset


@dataclass(frozen=True)
class BasisFamily:
    """Basis functions applied to squared residuals."""

    functions: tuple

    @property
    def h(self) -> int:
        return len(self.functions)

    @classmethod
    def polynomial(cls, h: int = 3) -> "BasisFamily":
        if h < 1:
            raise ValueError("need at least one basis function")
        return cls(tuple((lambda u, v=v: u ** v) for v in range(1, h + 1)))

    @classmethod
    def from_callables(cls, fns: Sequence[Callable]) -> "BasisFamily":
        if not fns:
            raise ValueError("need at least one basis function")
        return cls(tuple(fns))

    def transform(self, u) -> np.ndarray:
        """``(n, h)`` matrix of ``f_v(u)``."""
        u = np.asarray(u, dtype=float)
        return np.column_stack([np.asarray(f(u), dtype=float) * np.ones_like(u)
                                for f in self.functions])


@dataclass(frozen=True)
class ScreeningResult:
    w_stats: np.ndarray          # (l, p)
    theta_hats: np.ndarray       # (l, h, p)
    gamma_hats: np.ndarray       # (l, p, p); row j holds gamma_kj with a zero at j
    critical_value: float
    active_sets: tuple
    union_set: tuple
    jittered: np.ndarray         # (l, p) flags for regularised Omega_kj


def _standardize(a):
    a = a - a.mean(axis=0)
    sd = a.std(axis=0)
    return np.where(sd > 0, a / np.where(sd > 0, sd, 1.0), 0.0)


def _centered_design(data: Dataset, k: int) -> np.ndarray:
    xk = data.x[:, :, k]
    return xk - xk.mean(axis=0)


def basis_responses(resid_k, basis: BasisFamily) -> np.ndarray:
    """Standardised ``f_v(R_ik^2)`` columns, shape ``(n, h)``."""
    return _standardize(basis.transform(np.asarray(resid_k, dtype=float) ** 2))


def fit_basis_regressions(data: Dataset, resid, basis: BasisFamily, k: int,
                          lambda_grid=None, n_lambda: int = 50) -> np.ndarray:
    """Lasso fits of ``f_v(R_ik^2)`` on ``X_ik``; returns ``theta`` of shape ``(h, p)``."""
    xk = _centered_design(data, k)
    n = data.n
    f = basis_responses(np.asarray(resid)[:, k], basis)
    gram = xk.T @ xk / n
    theta = np.zeros((basis.h, data.p))
    for v in range(basis.h):
        c = xk.T @ f[:, v] / n
        fit = lasso_bic_gram(gram, c, f[:, v] @ f[:, v] / n, n, lambda_grid, n_lambda)
        theta[v] = fit.coef
    return theta


def _decorrelation_from_gram(gram, n, j, lambda_grid=None, n_lambda=50):
    rest = np.delete(np.arange(gram.shape[0]), j)
    g = gram[np.ix_(rest, rest)]
    c = gram[rest, j]
    return lasso_bic_gram(g, c, gram[j, j], n, lambda_grid, n_lambda).coef


def fit_decorrelation(data: Dataset, k: int, j: int, lambda_grid=None,
                      n_lambda: int = 50) -> np.ndarray:
    """Lasso regression of ``X_ikj`` on ``X_ik,-j``; length ``p - 1``."""
    if data.p < 2:
        raise ValueError("decorrelation needs p >= 2")
    xk = _centered_design(data, k)
    return _decorrelation_from_gram(xk.T @ xk / data.n, data.n, j, lambda_grid, n_lambda)


def _omega_solve(sbar, omega):
    """``sbar' omega^{-1} sbar`` with a relative ridge where ``omega`` is singular."""
    h = omega.shape[-1]
    tr = np.trace(omega)
    try:
        np.linalg.cholesky(omega)
        if np.linalg.cond(omega) < 1e12:
            return float(sbar @ np.linalg.solve(omega, sbar)), False
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-8 * tr / h if tr > 0 else 1.0
    om = omega + ridge * np.eye(h)
    return float(sbar @ np.linalg.solve(om, sbar)), True


def score_statistic(data: Dataset, resid, theta_k, gamma_kj, basis: BasisFamily,
                    k: int, j: int) -> tuple[float, bool]:
    """``W_kj`` for one ``(k, j)``; returns ``(W, jittered)``.

    ``theta_k`` is the full ``(h, p)`` fit; coordinate ``j`` is dropped
    rather than refitted.
    """
    xk = _centered_design(data, k)
    f = basis_responses(np.asarray(resid)[:, k], basis)
    rest = np.delete(np.arange(data.p), j)
    theta_k = np.atleast_2d(theta_k)
    z = xk[:, j] - xk[:, rest] @ np.asarray(gamma_kj, dtype=float)
    e = f - xk[:, rest] @ theta_k[:, rest].T
    s = z[:, None] * e
    return score_from_scores(s)


def score_from_scores(s) -> tuple[float, bool]:
    """Quadratic form from per-unit score vectors ``s`` of shape ``(n, h)``."""
    s = np.asarray(s, dtype=float).reshape(s.shape[0], -1)
    n = s.shape[0]
    sbar = s.sum(axis=0) / np.sqrt(n)
    omega = s.T @ s / n
    w, jit = _omega_solve(sbar, omega)
    return max(w, 0.0), jit


def critical_value(h: int, p: int, alpha: float | None = 0.05, c: float | None = None) -> float:
    """Upper ``alpha_p / p`` quantile of chi-square(h).

    ``alpha_p`` is ``alpha`` or, when ``c`` is given, ``p ** -c``.
    """
    if p < 1 or h < 1:
        raise ValueError("need h >= 1 and p >= 1")
    a = p ** (-float(c)) if c is not None else alpha
    if not 0 < a < 1 + 1e-15:
        raise ValueError("alpha must lie in (0, 1)")
    tail = min(a / p, 1.0)
    return float(stats.chi2.isf(tail, h)) if tail < 1 else 0.0


def select_active_set(w_stats, t0: float) -> tuple[tuple, tuple]:
    """Per-measurement sets ``{j : W_kj >= t0}`` and their union."""
    w = np.atleast_2d(w_stats)
    per_k = tuple(tuple(int(j) for j in np.flatnonzero(row >= t0)) for row in w)
    union = tuple(sorted(set().union(*per_k))) if per_k else ()
    return per_k, union


def screen(data: Dataset, resid, basis: BasisFamily | None = None, alpha: float = 0.05,
           c: float | None = None, n_lambda: int = 50) -> ScreeningResult:
    """Run the screening for every measurement and covariate."""
    basis = basis or BasisFamily.polynomial(3)
    resid = np.asarray(resid, dtype=float)
    n, p, l = data.n, data.p, data.l  # noqa: E741
    if p < 2:
        raise ValueError("screening needs p >= 2")
    h = basis.h
    w_all = np.zeros((l, p))
    jit_all = np.zeros((l, p), dtype=bool)
    thetas = np.zeros((l, h, p))
    gammas = np.zeros((l, p, p))
    for k in range(l):
        xk = _centered_design(data, k)
        gram = xk.T @ xk / n
        f = basis_responses(resid[:, k], basis)
        for v in range(h):
            fit = lasso_bic_gram(gram, xk.T @ f[:, v] / n, f[:, v] @ f[:, v] / n, n,
                                 None, n_lambda)
            thetas[k, v] = fit.coef
        for j in range(p):
            gammas[k, j, np.arange(p) != j] = _decorrelation_from_gram(gram, n, j, None, n_lambda)
        # all j at once: z_j = X_j - X gamma_j,  e_jv = (f_v - X theta_v) + X_j theta_vj
        z = xk - xk @ gammas[k].T
        base = f - xk @ thetas[k].T                       # (n, h)
        e = base[:, None, :] + xk[:, :, None] * thetas[k].T[None, :, :]   # (n, p, h)
        s = z[:, :, None] * e
        for j in range(p):
            w_all[k, j], jit_all[k, j] = score_from_scores(s[:, j, :])
    t0 = critical_value(h, p, alpha, c)
    per_k, union = select_active_set(w_all, t0)
    return ScreeningResult(w_all, thetas, gammas, t0, per_k, union, jit_all)
