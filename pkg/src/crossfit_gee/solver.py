"""Estimating function, its Jacobian, and the partially penalized solver.

The estimating function is

    U_n(beta) = (1/n) sum_i X_i D_i(beta) W_i {Y_i - g(X_i' beta)},

with ``W_i`` the inverse working covariance of unit ``i``.  Penalized
solutions satisfy ``0 in U_n(beta) - dP(beta)`` where ``dP`` is the
SCAD/MCP subgradient on coordinates outside the unpenalized set ``M``.

The solver iterates local quadratic approximation (LQA) Newton steps on the
currently nonzero coordinates, sets small penalized coordinates to exactly
zero, polishes the surviving support with Newton steps on the exact
penalized equations, and re-admits zero coordinates whose equations violate
the subgradient bound.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .model import Dataset, LinkFunction, ModelSpec, ParameterVector, get_link
from .penalty import PenaltyConfig, penalty_derivative, penalty_second_derivative

logger = logging.getLogger(__name__)

LQA_EPS = 1e-6
COARSE_TOL = 1e-3


class SingularCovarianceError(np.linalg.LinAlgError):
    """A working covariance was not invertible at some unit."""


@dataclass(frozen=True)
class WorkingCovariance:
    """Working covariance: ``identity``, ``fixed`` (one SPD matrix) or
    ``estimated`` (any object exposing ``inverse_for(data)``)."""

    kind: str = "identity"
    matrix: np.ndarray | None = None
    model: object = None

    def __post_init__(self):
        if self.kind not in ("identity", "fixed", "estimated"):
            raise ValueError(f"unknown working covariance kind {self.kind!r}")
        if self.kind == "fixed":
            m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            if m.shape[0] != m.shape[1] or not np.allclose(m, m.T):
                raise ValueError("fixed working covariance must be symmetric")
            try:
                np.linalg.cholesky(m)
            except np.linalg.LinAlgError:
                raise ValueError("fixed working covariance must be positive definite") from None
            object.__setattr__(self, "matrix", m)
        if self.kind == "estimated" and not hasattr(self.model, "inverse_for"):
            raise TypeError("estimated covariance needs a model with inverse_for(data)")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def fixed(cls, matrix):
        return cls("fixed", matrix=matrix)

    @classmethod
    def estimated(cls, model):
        return cls("estimated", model=model)

    def inverse_for(self, data: Dataset) -> np.ndarray | None:
        """Per-unit inverse covariances ``(n, l, l)``; ``None`` means identity."""
        if self.kind == "identity":
            return None
        if self.kind == "fixed":
            if self.matrix.shape[0] != data.l:
                raise ValueError("fixed covariance dimension differs from l")
            inv = np.linalg.inv(self.matrix)
            return np.broadcast_to(inv, (data.n, data.l, data.l))
        winv = np.asarray(self.model.inverse_for(data), dtype=float)
        if not np.all(np.isfinite(winv)):
            raise SingularCovarianceError("non-finite inverse working covariance")
        return winv


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.  ``lambda_n=None`` selects the level by HBIC on a grid."""

    lambda_n: float | None = None
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    tol: float = 1e-8
    max_iter: int = 100
    zero_threshold: float = 1e-4
    n_lambda: int = 20
    lambda_ratio: float | None = None
    max_kkt_rounds: int = 20

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.lambda_n is not None and self.lambda_n < 0:
            raise ValueError("lambda_n must be nonnegative")

    def penalty_at(self, lam: float) -> PenaltyConfig:
        return self.penalty.with_lambda(lam)


@dataclass(frozen=True)
class FitResult:
    beta: ParameterVector
    converged: bool
    iterations: int
    final_update_norm: float
    equation_norm_on_support: float
    kkt_violation: float
    lambda_n: float
    objective: float
    hbic: float
    path: "LambdaPath | None" = None

    @property
    def coef(self) -> np.ndarray:
        return self.beta.beta

    @property
    def support(self) -> tuple:
        return self.beta.support


@dataclass(frozen=True)
class LambdaPath:
    lambdas: np.ndarray
    hbic: np.ndarray
    df: np.ndarray
    best: int


# ---------------------------------------------------------------------------
# estimating function and Jacobian
# ---------------------------------------------------------------------------

def _pieces(x, y, beta, link, winv):
    eta = np.einsum("ipk,p->ik", x, beta)
    r = y - link.g(eta)
    d1 = link.g1(eta)
    wr = r if winv is None else np.einsum("ikm,im->ik", winv, r)
    return eta, r, d1, wr


def _u(x, d1, wr):
    return np.tensordot(x, d1 * wr, axes=([0, 2], [0, 1])) / x.shape[0]


def _jac(x, xc, eta, d1, wr, link, winv, fisher_only=False):
    """d U / d beta_cols, shape ``(x.shape[1], xc.shape[1])``."""
    n = x.shape[0]
    a = x * d1[:, None, :]
    ac = xc * d1[:, None, :]
    aw = a if winv is None else np.einsum("ipk,ikm->ipm", a, winv)
    out = -np.tensordot(aw, ac, axes=([0, 2], [0, 2]))
    if not fisher_only:
        g2 = link.g2(eta)
        out += np.tensordot(x * (g2 * wr)[:, None, :], xc, axes=([0, 2], [0, 2]))
    return out / n


def estimating_function(data: Dataset, beta, link=None, cov=None, *, winv=None) -> np.ndarray:
    """``U_n(beta)``, a length-``p`` vector."""
    link = get_link(link or "identity")
    beta = np.asarray(beta, dtype=float)
    if winv is None and cov is not None:
        winv = cov.inverse_for(data)
    _, _, d1, wr = _pieces(data.x, data.y, beta, link, winv)
    return _u(data.x, d1, wr)


def estimating_jacobian(data: Dataset, beta, link=None, cov=None, cols=None, *,
                        winv=None) -> np.ndarray:
    """Analytic ``dU_n/d beta[cols]`` (``p x |cols|``).

    Sums the ``-X D W D X'`` term and the second-derivative term
    ``sum_k X_ik X_ik' g''(X_ik' beta) (W R)_k``; for a diagonal ``W`` the
    latter weight reduces to ``W_kk R_k``.
    """
    link = get_link(link or "identity")
    beta = np.asarray(beta, dtype=float)
    if winv is None and cov is not None:
        winv = cov.inverse_for(data)
    cols = np.arange(data.p) if cols is None else np.asarray(cols, dtype=int)
    eta, _, d1, wr = _pieces(data.x, data.y, beta, link, winv)
    return _jac(data.x, data.x[:, cols, :], eta, d1, wr, link, winv)


def weighted_objective(data: Dataset, beta, link, winv) -> float:
    """``(1/n) sum_i R_i' W_i R_i``; used for HBIC only."""
    r = data.y - link.g(data.linear_predictor(beta))
    if winv is None:
        return float(np.mean(np.sum(r * r, axis=1)))
    return float(np.mean(np.einsum("ik,ikm,im->i", r, winv, r)))


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

def _solve_spd(h, rhs):
    h = 0.5 * (h + h.T)
    ridge = 1e-8 * max(np.trace(h) / h.shape[0], 1e-12)
    h[np.diag_indices_from(h)] += ridge
    c = linalg.cho_factor(h, check_finite=False)
    return linalg.cho_solve(c, rhs, check_finite=False)


class _Problem:
    """Holds the data arrays and fixed weights for one solve.

    ``state`` bundles everything the equations need at one ``beta`` on the
    alive coordinates; ``u`` and ``newton`` read from it.  For the identity
    link the equations are linear, ``U = c - G beta``, and ``G`` and ``c``
    are formed once.
    """

    def __init__(self, data, link, winv, m_set, pen):
        self.data = data
        self.x = data.x
        self.y = data.y
        self.link = link
        self.winv = winv
        self.p = data.p
        self.pen = pen
        self.penalized = np.ones(self.p, dtype=bool)
        self.penalized[list(m_set)] = False
        self.m_set = tuple(m_set)
        self.linear = link.kind == "identity"
        if self.linear:
            n = data.n
            xw = self.x if winv is None else np.einsum("ipk,ikm->ipm", self.x, winv)
            self.gram = np.tensordot(xw, self.x, axes=([0, 2], [0, 2])) / n
            self.gram = 0.5 * (self.gram + self.gram.T)
            self.c = np.tensordot(xw, self.y, axes=([0, 2], [0, 1])) / n

    def state(self, beta, alive):
        if self.linear:
            return beta[alive], alive
        xa = self.x[:, alive, :]
        eta = np.einsum("ipk,p->ik", xa, beta[alive])
        r = self.y - self.link.g(eta)
        d1 = self.link.g1(eta)
        wr = r if self.winv is None else np.einsum("ikm,im->ik", self.winv, r)
        return xa, eta, d1, wr

    def u(self, st):
        if self.linear:
            b, alive = st
            return self.c[alive] - self.gram[np.ix_(alive, alive)] @ b
        xa, _, d1, wr = st
        return _u(xa, d1, wr)

    def u_full(self, beta):
        alive = np.flatnonzero(beta != 0)
        if self.linear:
            return self.c - self.gram[:, alive] @ beta[alive]
        _, _, d1, wr = self.state(beta, alive)
        return _u(self.x, d1, wr)

    def newton_matrix(self, st, fisher=False):
        """Positive version of the Jacobian, ``-dU/dbeta`` on the alive set."""
        if self.linear:
            alive = st[1]
            return self.gram[np.ix_(alive, alive)].copy()
        xa, eta, d1, wr = st
        return -_jac(xa, xa, eta, d1, wr, self.link, self.winv, fisher_only=fisher)


def _lqa(prob: _Problem, beta, alive, cfg: SolverConfig, tol=None):
    tol = cfg.tol if tol is None else tol
    pen = prob.pen
    thr = cfg.zero_threshold
    upd = np.inf
    it = 0
    converged = False
    if alive.size == 0:
        return beta, alive, 0, 0.0, True
    while it < cfg.max_iter:
        it += 1
        b = beta[alive]
        pmask = prob.penalized[alive]
        st = prob.state(beta, alive)
        u = prob.u(st)
        e = np.where(pmask, penalty_derivative(b, pen) / (LQA_EPS + np.abs(b)), 0.0)
        rhs = u - e * b
        h = prob.newton_matrix(st)
        h[np.diag_indices_from(h)] += e
        try:
            step = _solve_spd(h, rhs)
        except linalg.LinAlgError:
            h = prob.newton_matrix(st, fisher=True)
            h[np.diag_indices_from(h)] += e
            step = _solve_spd(h, rhs)
        merit = np.linalg.norm(rhs)
        alpha = 1.0
        trial = beta.copy()
        for _ in range(8):
            trial[alive] = b + alpha * step
            ut = prob.u(prob.state(trial, alive))
            if np.linalg.norm(ut - e * trial[alive]) <= merit * (1 + 1e-10):
                break
            alpha *= 0.5
        new = trial[alive]
        kill = pmask & (np.abs(new) < thr)
        new[kill] = 0.0
        upd = float(np.max(np.abs(new - b))) if b.size else 0.0
        beta = beta.copy()
        beta[alive] = new
        alive = alive[~kill]
        if upd < tol or alive.size == 0:
            converged = True
            break
    return beta, alive, it, upd, converged


def _penalized_eq(prob: _Problem, beta, alive):
    st = prob.state(beta, alive)
    b = beta[alive]
    pmask = prob.penalized[alive]
    pen_grad = np.where(pmask, np.sign(b) * penalty_derivative(b, prob.pen), 0.0)
    return prob.u(st) - pen_grad, st


def _polish(prob: _Problem, beta, alive, cfg: SolverConfig, max_iter=30):
    """Newton on the exact penalized equations with the support held fixed."""
    if alive.size == 0:
        return beta, 0.0
    f, st = _penalized_eq(prob, beta, alive)
    fnorm = float(np.max(np.abs(f)))
    for _ in range(max_iter):
        if fnorm <= 0.1 * cfg.tol:
            break
        b = beta[alive]
        pmask = prob.penalized[alive]
        # Jacobian of U - sign(b) rho'(|b|) is dU/db - diag(rho''(|b|))
        jac = -prob.newton_matrix(st)
        jac[np.diag_indices_from(jac)] -= np.where(pmask, penalty_second_derivative(b, prob.pen), 0.0)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            break
        trial = beta.copy()
        trial[alive] = b + step
        tb = trial[alive]
        if np.any(pmask & ((np.sign(tb) != np.sign(b)) | (np.abs(tb) < cfg.zero_threshold))):
            break
        ft, st_t = _penalized_eq(prob, trial, alive)
        ftn = float(np.max(np.abs(ft)))
        if not ftn < fnorm:
            break
        beta, f, st, fnorm = trial, ft, st_t, ftn
    return beta, fnorm


def _solve_fixed(prob: _Problem, init, cfg: SolverConfig) -> FitResult:
    lam = prob.pen.lam
    beta = np.array(init, dtype=float)
    beta[prob.penalized & (np.abs(beta) < cfg.zero_threshold)] = 0.0
    total_it = 0
    converged = False
    upd = np.inf
    eq_norm = np.inf
    kkt = np.inf
    for _ in range(cfg.max_kkt_rounds):
        alive = np.flatnonzero((beta != 0) | ~prob.penalized)
        # a loose LQA pass usually fixes the support; Newton then finishes
        # the job far faster than LQA's linear convergence would
        trial, t_alive, it, upd, converged = _lqa(prob, beta, alive, cfg, COARSE_TOL)
        total_it += it
        trial, eq_norm = _polish(prob, trial, t_alive, cfg)
        if eq_norm <= 10 * cfg.tol:
            beta, alive, upd, converged = trial, t_alive, min(upd, eq_norm), True
        else:
            beta, alive, it, upd, converged = _lqa(prob, trial, t_alive, cfg)
            total_it += it
            beta, eq_norm = _polish(prob, beta, alive, cfg)
        u = prob.u_full(beta)
        dead = prob.penalized & (beta == 0)
        excess = np.where(dead, np.abs(u) - lam, -np.inf)
        kkt = float(max(np.max(excess, initial=-np.inf), 0.0))
        enter = np.flatnonzero(excess > 1e-6 * max(lam, 1e-12) + cfg.tol)
        if enter.size == 0:
            break
        scale = np.einsum("ijk,ijk->j", prob.x[:, enter, :], prob.x[:, enter, :]) / prob.x.shape[0]
        start = (np.abs(u[enter]) - lam) / np.maximum(scale, 1e-12)
        beta[enter] = np.sign(u[enter]) * np.maximum(start, 10 * cfg.zero_threshold)
        converged = False
    else:
        logger.debug("KKT re-entry rounds exhausted at lambda=%g", lam)
    converged = bool(converged and eq_norm <= 10 * cfg.tol)
    obj = weighted_objective(prob.data, beta, prob.link, prob.winv)
    return FitResult(
        beta=ParameterVector(beta, prob.m_set),
        converged=converged,
        iterations=total_it,
        final_update_norm=float(upd),
        equation_norm_on_support=float(eq_norm),
        kkt_violation=kkt,
        lambda_n=float(lam),
        objective=obj,
        hbic=hbic(obj, np.count_nonzero(beta), prob.data.n, prob.p),
    )


def hbic(objective: float, df: int, n: int, p: int) -> float:
    """High-dimensional BIC ``log Q + df log(log n) log(max(p, n)) / n``."""
    c_n = np.log(np.log(max(n, 3)))
    return float(np.log(max(objective, 1e-300)) + df * c_n * np.log(max(p, n)) / n)


def ridge_init(data: Dataset, link, winv=None, ridge: float | None = None,
               max_iter: int = 25) -> np.ndarray:
    """Working-independence ridge fit by Fisher scoring from zero."""
    link = get_link(link)
    x = data.x
    if ridge is None:
        ridge = 0.1 * float(np.einsum("ipk,ipk->", x, x)) / (data.n * data.p)
    beta = np.zeros(data.p)
    for _ in range(max_iter):
        eta, r, d1, wr = _pieces(x, data.y, beta, link, winv)
        u = _u(x, d1, wr) - ridge * beta
        h = -_jac(x, x, eta, d1, wr, link, winv, fisher_only=True)
        h[np.diag_indices_from(h)] += ridge
        step = _solve_spd(h, u)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-8:
            break
    return beta


def _unpenalized_start(prob: _Problem, cfg: SolverConfig) -> np.ndarray:
    beta = np.zeros(prob.p)
    if not prob.m_set:
        return beta
    free = replace(cfg, zero_threshold=0.0)
    saved = prob.pen
    prob.pen = saved.with_lambda(0.0)
    beta, *_ = _lqa(prob, beta, np.asarray(prob.m_set), free)
    prob.pen = saved
    return beta


def penalized_solve(data: Dataset, spec: ModelSpec, cov: WorkingCovariance | None = None,
                    cfg: SolverConfig | None = None, init=None, *, winv=None,
                    lambdas=None) -> FitResult:
    """Solve ``0 in U_n(beta) - dP(beta; M)``.

    With ``cfg.lambda_n`` set, solves at that level starting from ``init``
    (default: a working-independence ridge fit).  Otherwise fits a
    decreasing grid of levels with warm starts and returns the HBIC
    minimiser, with the path attached.
    """
    cfg = cfg or SolverConfig()
    cov = cov or WorkingCovariance.identity()
    link = spec.link
    if winv is None:
        winv = cov.inverse_for(data)
    if cfg.lambda_n is not None:
        prob = _Problem(data, link, winv, spec.m_set, cfg.penalty_at(cfg.lambda_n))
        if init is None:
            init = ridge_init(data, link)
        init = np.asarray(init, dtype=float)
        if init.shape != (data.p,):
            raise ValueError(f"init has shape {init.shape}, expected ({data.p},)")
        return _solve_fixed(prob, init, cfg)
    return _fit_path(data, spec, winv, cfg, lambdas)


def _fit_path(data, spec, winv, cfg: SolverConfig, lambdas=None) -> FitResult:
    prob = _Problem(data, spec.link, winv, spec.m_set, cfg.penalty_at(0.0))
    start = _unpenalized_start(prob, cfg)
    if lambdas is None:
        u = prob.u_full(start)
        lam_max = float(np.max(np.abs(u[prob.penalized]), initial=0.0))
        if lam_max <= 0:
            lambdas = np.zeros(1)
        else:
            ratio = cfg.lambda_ratio or (0.05 if data.n * data.l > data.p else 0.1)
            lambdas = np.geomspace(lam_max, lam_max * ratio, cfg.n_lambda)
    lambdas = np.asarray(lambdas, dtype=float)
    max_df = max(len(spec.m_set) + 1, int(data.n * data.l / np.log(max(data.n, 3))))
    fits, crit, dfs = [], [], []
    beta = start
    for lam in lambdas:
        prob.pen = cfg.penalty_at(lam)
        fit = _solve_fixed(prob, beta, cfg)
        beta = fit.coef.copy()
        fits.append(fit)
        crit.append(fit.hbic)
        dfs.append(len(fit.support))
        if dfs[-1] > max_df:
            break
    crit = np.asarray(crit)
    best = int(np.argmin(crit))
    path = LambdaPath(lambdas[: len(fits)], crit, np.asarray(dfs), best)
    return replace(fits[best], path=path)
