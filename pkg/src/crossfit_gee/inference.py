"""Sandwich covariance, Wald tests and chi-square tail probabilities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaincc, gammaln

from .model import Dataset, get_link


@dataclass(frozen=True)
class HypothesisSpec:
    """``H0: C beta_M = t`` with ``C`` of full row rank ``r <= m``."""

    C: np.ndarray
    t: np.ndarray
    m_set: tuple

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        t = np.atleast_1d(np.asarray(self.t, dtype=float))
        m_set = tuple(int(j) for j in self.m_set)
        r, m = C.shape
        if m != len(m_set):
            raise ValueError(f"C has {m} columns but |M| = {len(m_set)}")
        if t.shape != (r,):
            raise ValueError(f"t has shape {t.shape}, expected ({r},)")
        if r > m or np.linalg.matrix_rank(C) != r:
            raise ValueError("C must have full row rank r <= m")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "m_set", m_set)

    @property
    def r(self) -> int:
        return self.C.shape[0]

    @classmethod
    def identity(cls, m_set, t=None) -> "HypothesisSpec":
        m = len(tuple(m_set))
        return cls(np.eye(m), np.zeros(m) if t is None else t, m_set)


@dataclass(frozen=True)
class SandwichCovariance:
    v1: np.ndarray
    v2: np.ndarray
    omega: np.ndarray
    support: tuple

    def block(self, index) -> np.ndarray:
        """Sub-matrix of ``omega`` for the given coefficient indices."""
        pos = [self.support.index(int(j)) for j in index]
        return self.omega[np.ix_(pos, pos)]


@dataclass(frozen=True)
class WaldReport:
    statistic: float
    df: int
    p_value: float
    noncentrality: float


def sandwich(data: Dataset, beta_hat, link=None, support=None, *, winv=None,
             resid_outer=None) -> SandwichCovariance:
    """``V1^{-1} V2 V1^{-1}`` on ``support`` with per-unit inverse weights ``winv``.

    ``winv=None`` means identity weights.  ``resid_outer`` replaces the
    residual outer products ``R_i R_i'`` when given, shape ``(n, l, l)``.
    """
    link = get_link(link or "identity")
    beta_hat = np.asarray(beta_hat, dtype=float)
    if support is None:
        support = np.flatnonzero(beta_hat)
    support = tuple(sorted(int(j) for j in support))
    if not support:
        raise ValueError("empty support")
    eta = data.linear_predictor(beta_hat)
    d1 = link.g1(eta)
    a = data.x[:, support, :] * d1[:, None, :]                 # (n, s, l)
    n = data.n
    if winv is None:
        aw = a
    else:
        aw = np.einsum("isk,ikm->ism", a, winv)
    v1 = np.tensordot(aw, a, axes=([0, 2], [0, 2])) / n
    if resid_outer is None:
        r = data.y - link.g(eta)
        score = np.einsum("isk,ik->is", aw, r)
        v2 = score.T @ score / n
    else:
        v2 = np.einsum("isk,ikm,itm->st", aw, resid_outer, aw) / n
    v1 = 0.5 * (v1 + v1.T)
    v2 = 0.5 * (v2 + v2.T)
    if np.linalg.matrix_rank(v1) < len(support):
        raise np.linalg.LinAlgError(
            f"V1 is singular on a support of size {len(support)} with n={n}")
    v1_inv = np.linalg.inv(v1)
    omega = v1_inv @ v2 @ v1_inv
    omega = 0.5 * (omega + omega.T)
    return SandwichCovariance(v1, v2, omega, support)


def noncentrality(h_drift, C, omega) -> float:
    """``h' (C Omega C')^{-1} h``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    h = np.atleast_1d(np.asarray(h_drift, dtype=float))
    cov = C @ np.atleast_2d(omega) @ C.T
    return float(max(h @ np.linalg.solve(cov, h), 0.0))


def wald(beta_hat_m, hyp: HypothesisSpec, omega_m, n: int, h_drift=None) -> WaldReport:
    """``W_n = n (C b - t)' (C Omega C')^{-1} (C b - t)`` with a chi-square(r) p-value.

    The reported noncentrality is ``h' (C Omega C')^{-1} h`` when a drift is
    supplied and the moment estimate ``max(W_n - r, 0)`` otherwise.
    """
    b = np.atleast_1d(np.asarray(beta_hat_m, dtype=float))
    if b.shape != (hyp.C.shape[1],):
        raise ValueError(f"beta_M has length {b.size}, expected {hyp.C.shape[1]}")
    diff = hyp.C @ b - hyp.t
    cov = hyp.C @ np.atleast_2d(omega_m) @ hyp.C.T
    try:
        stat = float(n * diff @ np.linalg.solve(cov, diff))
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("C Omega C' is singular") from None
    stat = max(stat, 0.0)
    delta = (noncentrality(h_drift, hyp.C, omega_m) if h_drift is not None
             else max(stat - hyp.r, 0.0))
    return WaldReport(stat, hyp.r, chi2_sf(stat, hyp.r), delta)


def _poisson_window(mu: float):
    """Index range holding all but ~1e-15 of the Poisson(mu) mass."""
    j0 = int(math.floor(mu))
    half = int(math.ceil(12.0 * math.sqrt(mu) + 40))
    j = np.arange(max(0, j0 - half), j0 + half + 1)
    logw = -mu + j * math.log(mu) - gammaln(j + 1.0)
    return j, np.exp(logw)


def _mixture(x: float, df: float, nc: float, upper: bool) -> float:
    mu = 0.5 * nc
    j, w = _poisson_window(mu)
    probs = (gammaincc if upper else gammainc)(0.5 * df + j, 0.5 * x)
    terms = w * probs
    # drop the negligible terms from the ends of the window
    total = terms.sum()
    keep = terms >= 1e-14 * total if total > 0 else np.ones_like(terms, dtype=bool)
    return float(min(max(np.sum(terms[keep]), 0.0), 1.0))


def chi2_cdf(x: float, df: float, noncentrality: float = 0.0) -> float:
    """CDF of the (noncentral) chi-square distribution.

    Central case via the regularised incomplete gamma function; the
    noncentral case as a Poisson mixture of central CDFs.
    """
    if df <= 0:
        raise ValueError("df must be positive")
    if noncentrality < 0:
        raise ValueError("noncentrality must be nonnegative")
    if x <= 0:
        return 0.0
    if noncentrality == 0:
        return float(gammainc(0.5 * df, 0.5 * x))
    return _mixture(x, df, noncentrality, upper=False)


def chi2_sf(x: float, df: float, noncentrality: float = 0.0) -> float:
    """Upper tail ``1 - chi2_cdf``, computed directly for accuracy."""
    if df <= 0:
        raise ValueError("df must be positive")
    if noncentrality < 0:
        raise ValueError("noncentrality must be nonnegative")
    if x <= 0:
        return 1.0
    if noncentrality == 0:
        return float(gammaincc(0.5 * df, 0.5 * x))
    return _mixture(x, df, noncentrality, upper=True)


def chi2_quantile(q: float, df: float) -> float:
    """Central chi-square quantile by bracketing and bisection on the CDF."""
    if not 0 <= q < 1:
        raise ValueError("q must lie in [0, 1)")
    if q == 0:
        return 0.0
    lo, hi = 0.0, max(1.0, float(df))
    while chi2_cdf(hi, df) < q:
        lo, hi = hi, 2 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class PowerComparison:
    power_hat: float
    power_check: float
    delta_hat: float
    delta_check: float
    dominance: bool


def power_compare(omega_crossfit, omega_initial, C, h_drift, level: float = 0.05,
                  tol: float = 1e-10) -> PowerComparison:
    """Local power of the Wald test under both covariance matrices."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    om1 = np.atleast_2d(omega_crossfit)
    om0 = np.atleast_2d(omega_initial)
    if om1.shape != om0.shape or om1.shape[0] != C.shape[1]:
        raise ValueError("covariance matrices must share the hypothesis dimension")
    r = C.shape[0]
    crit = chi2_quantile(1 - level, r)
    d_hat = noncentrality(h_drift, C, om1)
    d_check = noncentrality(h_drift, C, om0)
    return PowerComparison(
        power_hat=chi2_sf(crit, r, d_hat),
        power_check=chi2_sf(crit, r, d_check),
        delta_hat=d_hat,
        delta_check=d_check,
        dominance=bool(d_hat >= d_check - tol * max(1.0, d_check)),
    )
