"""Synthetic data with covariate-dependent covariance and Monte Carlo studies.

Every experiment is deterministic given ``ScenarioConfig.seed``: replication
``r`` draws from the ``r``-th child of ``SeedSequence(seed)``, so results do
not depend on how replications are scheduled across workers.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import expit

from .crossfit import CrossfitConfig, crossfit, crossfit_wald, working_independence_wald
from .inference import HypothesisSpec, power_compare
from .kernel import fit_covariance_model, sup_error
from .model import Dataset, ModelSpec, get_link, residuals
from .penalty import PenaltyConfig
from .screening import BasisFamily, screen
from .solver import SolverConfig, WorkingCovariance, penalized_solve

logger = logging.getLogger(__name__)

COVARIANCE_FAMILIES = ("homoscedastic", "diag-exp", "exchangeable-varying")
EXPERIMENTS = ("rate", "support", "screening", "kernel_rate", "size", "power")


@dataclass(frozen=True)
class ScenarioConfig:
    """Simulation scenario.

    ``m_set`` is the first ``m`` coordinates; the ``s`` signal coordinates
    are drawn (from ``seed``) among the rest with magnitude ``signal`` and
    random signs.  Coefficients on ``m_set`` equal ``m_value`` plus
    ``drift / sqrt(n)`` when a drift is given.
    """

    n: int = 200
    p: int = 50
    l: int = 2  # noqa: E741
    s: int = 3
    m: int = 2
    link: str = "identity"
    covariance: str = "diag-exp"
    active_set: tuple = (0,)
    strength: float = 1.0
    rho: float = 0.3
    sigma2: float = 1.0
    signal: float = 1.0
    m_value: float = 0.0
    drift: tuple | None = None
    errors: str = "gaussian"
    working: str = "identity"
    n_large: int | None = None
    penalty: str = "scad"
    seed: int = 0
    replications: int = 100

    def __post_init__(self):
        if self.s + self.m > self.p:
            raise ValueError("s + m must not exceed p")
        if self.covariance not in COVARIANCE_FAMILIES:
            raise ValueError(f"unknown covariance family {self.covariance!r}")
        if any(j < 0 or j >= self.p for j in self.active_set):
            raise ValueError("active set outside 0..p-1")
        if self.errors not in ("gaussian", "bounded"):
            raise ValueError("errors must be 'gaussian' or 'bounded'")
        if self.working not in ("identity", "true"):
            raise ValueError("working must be 'identity' or 'true'")
        if self.drift is not None and len(self.drift) != self.m:
            raise ValueError("drift must have length m")
        object.__setattr__(self, "active_set", tuple(int(j) for j in self.active_set))
        get_link(self.link)

    @property
    def m_set(self) -> tuple:
        return tuple(range(self.m))


@dataclass(frozen=True)
class TrueCovariance:
    """The generating covariance function ``Sigma(X_{i,A})``."""

    family: str
    active_set: tuple
    l: int  # noqa: E741
    strength: float = 1.0
    rho: float = 0.3
    sigma2: float = 1.0

    def matrices(self, x_active) -> np.ndarray:
        """Covariances for blocks ``x_active`` of shape ``(n, |A|, l)``."""
        x_active = np.asarray(x_active, dtype=float)
        n, l = x_active.shape[0], self.l  # noqa: E741
        eye = np.eye(l)
        if self.family == "homoscedastic" or x_active.shape[1] == 0:
            c = self.sigma2 * ((1 - self.rho) * eye + self.rho * np.ones((l, l)))
            return np.broadcast_to(c, (n, l, l)).copy()
        if self.family == "diag-exp":
            var = np.exp(self.strength * x_active.mean(axis=1))    # (n, l)
            return var[:, :, None] * eye
        xbar = x_active.mean(axis=(1, 2))
        var = self.sigma2 * np.exp(self.strength * xbar)
        rho = 0.3 * expit(xbar)
        base = (1 - rho)[:, None, None] * eye + rho[:, None, None] * np.ones((l, l))
        return var[:, None, None] * base

    def __call__(self, x_vec) -> np.ndarray:
        """Covariance at one vectorised active block ``vec(X_{i,A})``."""
        xa = np.asarray(x_vec, dtype=float).reshape(1, len(self.active_set), self.l)
        return self.matrices(xa)[0]

    def for_data(self, data: Dataset) -> np.ndarray:
        return self.matrices(data.x[:, list(self.active_set), :])

    def inverse_for(self, data: Dataset) -> np.ndarray:
        return np.linalg.inv(self.for_data(data))


@dataclass(frozen=True)
class Truth:
    beta0: np.ndarray
    m_set: tuple
    signal_set: tuple
    active_set: tuple
    covariance: TrueCovariance

    @property
    def model_set(self) -> tuple:
        return tuple(sorted(set(self.m_set) | set(self.signal_set)))


def true_beta(cfg: ScenarioConfig, n: int | None = None) -> tuple[np.ndarray, tuple]:
    rng = np.random.default_rng([cfg.seed, 7919])
    pool = np.arange(cfg.m, cfg.p)
    sig = np.sort(rng.choice(pool, size=cfg.s, replace=False))
    beta = np.zeros(cfg.p)
    beta[sig] = cfg.signal * rng.choice([-1.0, 1.0], size=cfg.s)
    n = cfg.n if n is None else n
    beta[: cfg.m] = cfg.m_value
    if cfg.drift is not None:
        beta[: cfg.m] += np.asarray(cfg.drift, dtype=float) / np.sqrt(n)
    return beta, tuple(int(j) for j in sig)


def true_covariance(cfg: ScenarioConfig) -> TrueCovariance:
    return TrueCovariance(cfg.covariance, cfg.active_set, cfg.l, cfg.strength,
                          cfg.rho, cfg.sigma2)


def generate(cfg: ScenarioConfig, seed=None, n: int | None = None) -> tuple[Dataset, Truth]:
    """Draw a dataset: ``X`` iid Uniform(-1, 1), ``Y = g(X'beta0) + Sigma^{1/2} eps``."""
    n = cfg.n if n is None else n
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    beta, sig = true_beta(cfg, n)
    x = rng.uniform(-1.0, 1.0, size=(n, cfg.p, cfg.l))
    tc = true_covariance(cfg)
    sigma = tc.matrices(x[:, list(cfg.active_set), :])
    chol = np.linalg.cholesky(sigma)
    if cfg.errors == "gaussian":
        eps = rng.standard_normal((n, cfg.l))
    else:
        eps = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(n, cfg.l))
    link = get_link(cfg.link)
    mean = link.g(np.einsum("ipk,p->ik", x, beta))
    y = mean + np.einsum("ikm,im->ik", chol, eps)
    return Dataset(x, y), Truth(beta, cfg.m_set, sig, cfg.active_set, tc)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _spec(cfg: ScenarioConfig, hypothesis=None) -> ModelSpec:
    return ModelSpec(cfg.link, cfg.m_set, hypothesis)


def _solver(cfg: ScenarioConfig) -> SolverConfig:
    return SolverConfig(penalty=PenaltyConfig(cfg.penalty))


def _working(cfg: ScenarioConfig, truth: Truth) -> WorkingCovariance:
    if cfg.working == "true":
        return WorkingCovariance.estimated(truth.covariance)
    return WorkingCovariance.identity()


def _fit_error(cfg, rng_seed, n):
    data, truth = generate(cfg, rng_seed, n)
    fit = penalized_solve(data, _spec(cfg), _working(cfg, truth), _solver(cfg))
    return fit, truth


def _rep_rate(cfg: ScenarioConfig, seeds) -> dict:
    n_big = cfg.n_large or 4 * cfg.n
    out = {}
    for tag, n, sd in (("small", cfg.n, seeds[0]), ("large", n_big, seeds[1])):
        fit, truth = _fit_error(cfg, sd, n)
        out[f"err_{tag}"] = float(np.linalg.norm(fit.coef - truth.beta0))
        out[f"converged_{tag}"] = fit.converged
    return out


def _rep_support(cfg: ScenarioConfig, seeds) -> dict:
    fit, truth = _fit_error(cfg, seeds[0], cfg.n)
    off = np.setdiff1d(np.arange(cfg.p), truth.model_set)
    return {
        "offsupport_zero": bool(np.all(fit.coef[off] == 0)),
        "exact_support": set(fit.support) | set(cfg.m_set) == set(truth.model_set),
        "support_size": len(fit.support),
        "error": float(np.linalg.norm(fit.coef - truth.beta0)),
        "converged": fit.converged,
    }


def _rep_screening(cfg: ScenarioConfig, seeds) -> dict:
    data, truth = generate(cfg, seeds[0])
    spec = _spec(cfg)
    fit = penalized_solve(data, spec, WorkingCovariance.identity(), _solver(cfg))
    res = screen(data, residuals(data, fit.coef, spec.link), BasisFamily.polynomial(3))
    return {
        "exact": res.union_set == tuple(sorted(truth.active_set)),
        "nonempty": len(res.union_set) > 0,
        "selected": " ".join(str(j) for j in res.union_set),
    }


def kernel_grid(cfg: ScenarioConfig, points: int = 5, half_width: float = 0.7):
    """Interior grid over ``vec(X_{i,A})`` used for sup-norm errors."""
    d = len(cfg.active_set) * cfg.l
    axis = np.linspace(-half_width, half_width, points)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def _rep_kernel(cfg: ScenarioConfig, seeds) -> dict:
    n_big = cfg.n_large or 4 * cfg.n
    grid = kernel_grid(cfg)
    out = {}
    for tag, n, sd in (("small", cfg.n, seeds[0]), ("large", n_big, seeds[1])):
        data, truth = generate(cfg, sd, n)
        resid = residuals(data, truth.beta0, cfg.link)
        model = fit_covariance_model(data, resid, truth.active_set)
        # the model orders features as vec(X_{i,A}) with A sorted
        out[f"err_{tag}"] = sup_error(model, truth.covariance, list(grid))
    out["smaller"] = out["err_large"] < out["err_small"]
    return out


def _crossfit_cfg(cfg: ScenarioConfig) -> CrossfitConfig:
    return CrossfitConfig(solver=_solver(cfg))


def _rep_size(cfg: ScenarioConfig, seeds) -> dict:
    data, truth = generate(cfg, seeds[0])
    hyp = HypothesisSpec.identity(cfg.m_set, truth.beta0[list(cfg.m_set)] if cfg.drift is None
                                  else np.full(cfg.m, cfg.m_value))
    spec = _spec(cfg, hyp)
    res = crossfit(data, spec, _crossfit_cfg(cfg), seed=seeds[1])
    report, _ = crossfit_wald(data, res, spec)
    return {"statistic": report.statistic, "p_value": report.p_value,
            "reject": report.p_value < 0.05,
            "active": " ".join(str(j) for j in sorted(set().union(
                *(f.covariance.active_set for f in res.folds))))}


def _rep_power(cfg: ScenarioConfig, seeds) -> dict:
    if cfg.drift is None:
        raise ValueError("power experiment needs a drift")
    data, truth = generate(cfg, seeds[0])
    hyp = HypothesisSpec.identity(cfg.m_set, np.full(cfg.m, cfg.m_value))
    spec = _spec(cfg, hyp)
    res = crossfit(data, spec, _crossfit_cfg(cfg), seed=seeds[1])
    rep_x, sw_x = crossfit_wald(data, res, spec, h_drift=cfg.drift)
    rep_i, sw_i, _ = working_independence_wald(data, spec, _solver(cfg), h_drift=cfg.drift)
    m = list(cfg.m_set)
    pc = power_compare(sw_x.block(m), sw_i.block(m), hyp.C, cfg.drift)
    return {
        "reject_crossfit": rep_x.p_value < 0.05,
        "reject_initial": rep_i.p_value < 0.05,
        "stat_crossfit": rep_x.statistic,
        "stat_initial": rep_i.statistic,
        "delta_crossfit": pc.delta_hat,
        "delta_initial": pc.delta_check,
        "dominance": pc.dominance,
    }


_REPLICATION: dict[str, Callable] = {
    "rate": _rep_rate,
    "support": _rep_support,
    "screening": _rep_screening,
    "kernel_rate": _rep_kernel,
    "size": _rep_size,
    "power": _rep_power,
}


def _mean(rows, key):
    vals = [r[key] for r in rows if key in r]
    return float(np.mean(vals)) if vals else float("nan")


def _median(rows, key):
    vals = [r[key] for r in rows if key in r]
    return float(np.median(vals)) if vals else float("nan")


def _summarise(name: str, rows: list) -> dict:
    ok = [r for r in rows if not r.get("failed")]
    summary = {"experiment": name, "replications": len(rows), "failures": len(rows) - len(ok)}
    if name in ("rate", "kernel_rate"):
        small, large = _median(ok, "err_small"), _median(ok, "err_large")
        summary.update(median_err_small=small, median_err_large=large,
                       median_ratio=small / large if large > 0 else float("nan"),
                       q90_err_small=float(np.quantile([r["err_small"] for r in ok], 0.9)) if ok else float("nan"))
        if name == "kernel_rate":
            summary["prop_smaller"] = _mean(ok, "smaller")
    elif name == "support":
        summary.update(prop_offsupport_zero=_mean(ok, "offsupport_zero"),
                       prop_exact_support=_mean(ok, "exact_support"),
                       median_error=_median(ok, "error"))
    elif name == "screening":
        summary.update(prop_exact=_mean(ok, "exact"), prop_nonempty=_mean(ok, "nonempty"))
    elif name == "size":
        summary.update(rejection_rate=_mean(ok, "reject"), mean_statistic=_mean(ok, "statistic"))
    elif name == "power":
        summary.update(power_crossfit=_mean(ok, "reject_crossfit"),
                       power_initial=_mean(ok, "reject_initial"),
                       prop_dominance=_mean(ok, "dominance"),
                       median_delta_crossfit=_median(ok, "delta_crossfit"),
                       median_delta_initial=_median(ok, "delta_initial"))
    return summary


def _run_one(args):
    name, cfg, rep, child = args
    seeds = child.spawn(2)
    try:
        row = _REPLICATION[name](cfg, seeds)
        row = {"replication": rep, "failed": False, **row}
    except Exception as exc:  # noqa: BLE001 -- failures are recorded, not fatal
        logger.warning("replication %d of %s failed: %s", rep, name, exc)
        row = {"replication": rep, "failed": True, "message": f"{type(exc).__name__}: {exc}"}
    return row


@dataclass
class ExperimentResult:
    name: str
    config: ScenarioConfig
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def run_experiment(name: str, cfg: ScenarioConfig, reps: int | None = None,
                   n_jobs: int = 1) -> ExperimentResult:
    """Run ``reps`` replications of one experiment and summarise them."""
    if name not in _REPLICATION:
        raise ValueError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    reps = cfg.replications if reps is None else int(reps)
    if name == "power" and cfg.drift is None:
        raise ValueError("power experiment needs a drift")
    children = np.random.SeedSequence(cfg.seed).spawn(reps)
    jobs = [(name, cfg, r, children[r]) for r in range(reps)]
    if n_jobs > 1 and reps > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            rows = list(ex.map(_run_one, jobs, chunksize=max(1, reps // (4 * n_jobs))))
    else:
        rows = [_run_one(j) for j in jobs]
    return ExperimentResult(name, cfg, rows, _summarise(name, rows))


def write_metrics_csv(result: ExperimentResult, path) -> None:
    keys: list = []
    for row in result.rows:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in result.rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in keys})


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def summary_document(result: ExperimentResult) -> dict:
    cfg = asdict(result.config)
    return {"experiment": result.name, "config": cfg, "summary": result.summary}


def write_summary_json(result: ExperimentResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary_document(result), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def scenario_from_dict(d: dict) -> ScenarioConfig:
    d = dict(d)
    for key in ("active_set", "drift"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    return replace(ScenarioConfig(), **d)
