"""Two-fold cross-fitting: initial fits, covariance calibration, refits.

Each fold gets a working-independence fit whose residuals drive the
screening and the kernel covariance model.  The model learned on fold ``q``
is only ever evaluated on the units of the other fold, whose refit it
weights; the two refits are averaged.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .inference import HypothesisSpec, SandwichCovariance, WaldReport, sandwich, wald
from .kernel import CovarianceModel, fit_covariance_model
from .model import Dataset, ModelSpec, residuals
from .screening import BasisFamily, ScreeningResult, screen
from .solver import FitResult, SolverConfig, WorkingCovariance, penalized_solve

logger = logging.getLogger(__name__)


class FoldLeakError(RuntimeError):
    """A covariance model was evaluated on units it was trained on."""


@dataclass(frozen=True)
class FoldPlan:
    idx1: np.ndarray
    idx2: np.ndarray
    seed: object = None

    def __post_init__(self):
        a = np.sort(np.asarray(self.idx1, dtype=int))
        b = np.sort(np.asarray(self.idx2, dtype=int))
        if np.intersect1d(a, b).size:
            raise ValueError("folds overlap")
        for arr in (a, b):
            arr.setflags(write=False)
        object.__setattr__(self, "idx1", a)
        object.__setattr__(self, "idx2", b)

    @property
    def n(self) -> int:
        return self.idx1.size + self.idx2.size

    def fold(self, q: int) -> np.ndarray:
        if q not in (1, 2):
            raise ValueError("fold id must be 1 or 2")
        return self.idx1 if q == 1 else self.idx2


def split(n: int, seed=None) -> FoldPlan:
    """Uniform random halving with ``|I_1| = floor(n/2)``."""
    if n < 4:
        raise ValueError(f"need n >= 4 units to cross-fit, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return FoldPlan(perm[: n // 2], perm[n // 2:], seed)


@dataclass(frozen=True)
class CrossfitConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    refit_solver: SolverConfig | None = None
    basis_h: int = 3
    alpha: float = 0.05
    alpha_c: float | None = None
    screen_n_lambda: int = 50
    nu: float = 1.0
    c_h: float = 1.0
    jitter: float = 1e-6
    n_jobs: int = 1


@dataclass(frozen=True)
class AuditRecord:
    consumer_fold: int
    model_fold: int
    n_train: int
    n_queries: int
    violation: bool


@dataclass(frozen=True)
class FoldResult:
    fold_id: int
    index: np.ndarray
    initial: FitResult
    screening: ScreeningResult | None
    covariance: CovarianceModel
    refit: FitResult | None = None


@dataclass(frozen=True)
class CrossFitResult:
    beta_hat: np.ndarray
    plan: FoldPlan
    folds: tuple
    support: tuple
    fold_support_disagreement: tuple
    audit: tuple
    zero_threshold: float

    @property
    def beta_refits(self) -> tuple:
        return tuple(f.refit.coef for f in self.folds)

    @property
    def beta_initials(self) -> tuple:
        return tuple(f.initial.coef for f in self.folds)


class _AuditedModel:
    """Wraps a covariance model; checks and logs every evaluation."""

    def __init__(self, model: CovarianceModel, consumer_fold: int, consumer_index,
                 owner_index, log: list):
        self.model = model
        self.consumer_fold = consumer_fold
        self.consumer_index = np.asarray(consumer_index)
        self.owner_index = np.asarray(owner_index)
        self.log = log

    def inverse_for(self, data: Dataset):
        train = np.asarray(self.model.train_index, dtype=int)
        violation = bool(
            self.model.fold_id == self.consumer_fold
            or not np.isin(train, self.owner_index).all()
            or np.isin(train, self.consumer_index).any()
        )
        self.log.append(AuditRecord(self.consumer_fold, self.model.fold_id,
                                    train.size, data.n, violation))
        if violation:
            raise FoldLeakError(
                f"fold {self.consumer_fold} refit would use a model trained on its own units")
        return self.model.inverse_for(data)


def initial_fit(data_q: Dataset, spec: ModelSpec, cfg: SolverConfig | None = None) -> FitResult:
    """Working-independence penalized fit on one fold."""
    return penalized_solve(data_q, spec, WorkingCovariance.identity(), cfg)


def calibrate_fold(data_q: Dataset, beta_check, spec: ModelSpec, config: CrossfitConfig,
                   fold_id: int, train_index) -> tuple[ScreeningResult | None, CovarianceModel]:
    """Screen the covariance active set and build the kernel model on one fold.

    An empty active set yields a constant (pooled) covariance model.
    """
    resid = residuals(data_q, beta_check, spec.link)
    result = None
    active = ()
    if data_q.p >= 2:
        result = screen(data_q, resid, BasisFamily.polynomial(config.basis_h),
                        config.alpha, config.alpha_c, config.screen_n_lambda)
        active = result.union_set
    if not active:
        logger.info("fold %d: empty covariance active set, using pooled covariance", fold_id)
    model = fit_covariance_model(data_q, resid, active, nu=config.nu, c_h=config.c_h,
                                 jitter=config.jitter, fold_id=fold_id,
                                 train_index=train_index, beta_source=beta_check)
    return result, model


def crossfit_refit(data: Dataset, plan: FoldPlan, q_prime: int, model: CovarianceModel,
                   spec: ModelSpec, cfg: SolverConfig | None = None, init=None,
                   audit: list | None = None) -> tuple[FitResult, np.ndarray]:
    """Refit fold ``q_prime`` weighted by the model from the other fold.

    Returns the fit and the per-unit inverse covariances used.
    """
    q = 3 - q_prime
    log = audit if audit is not None else []
    audited = _AuditedModel(model, q_prime, plan.fold(q_prime), plan.fold(q), log)
    data_qp = data.subset(plan.fold(q_prime))
    winv = audited.inverse_for(data_qp)
    fit = penalized_solve(data_qp, spec, WorkingCovariance.estimated(model), cfg,
                          init=init, winv=winv)
    return fit, winv


def aggregate(beta1, beta2) -> np.ndarray:
    b1 = np.asarray(beta1, dtype=float)
    b2 = np.asarray(beta2, dtype=float)
    if b1.shape != b2.shape:
        raise ValueError("fold estimates differ in length")
    return 0.5 * (b1 + b2)


def crossfit(data: Dataset, spec: ModelSpec, config: CrossfitConfig | None = None,
             seed=None, plan: FoldPlan | None = None) -> CrossFitResult:
    """Run the full two-fold pipeline and average the refits."""
    config = config or CrossfitConfig()
    plan = plan or split(data.n, seed)
    if plan.n != data.n:
        raise ValueError("fold plan does not match the data")
    refit_cfg = config.refit_solver or config.solver

    def stage_one(q):
        idx = plan.fold(q)
        dq = data.subset(idx)
        init = initial_fit(dq, spec, config.solver)
        scr, model = calibrate_fold(dq, init.coef, spec, config, q, idx)
        return FoldResult(q, idx, init, scr, model)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(2) as ex:
            f1, f2 = ex.map(stage_one, (1, 2))
    else:
        f1, f2 = stage_one(1), stage_one(2)

    audit: list = []
    firsts = {1: f1, 2: f2}
    refits = {}
    for qp in (1, 2):
        owner = firsts[3 - qp]
        refits[qp] = crossfit_refit(data, plan, qp, owner.covariance, spec, refit_cfg,
                                    init=firsts[qp].initial.coef, audit=audit)
    folds = tuple(
        FoldResult(q, firsts[q].index, firsts[q].initial, firsts[q].screening,
                   firsts[q].covariance, refits[q][0])
        for q in (1, 2)
    )
    beta_hat = aggregate(refits[1][0].coef, refits[2][0].coef)
    thr = refit_cfg.zero_threshold
    penalized = np.ones(data.p, dtype=bool)
    penalized[list(spec.m_set)] = False
    beta_hat[penalized & (np.abs(beta_hat) < thr)] = 0.0
    s1, s2 = set(refits[1][0].support), set(refits[2][0].support)
    support = tuple(sorted(set(spec.m_set) | set(np.flatnonzero(beta_hat).tolist())))
    return CrossFitResult(beta_hat, plan, folds, support, tuple(sorted(s1 ^ s2)),
                          tuple(audit), thr)


def fold_matched_inverses(data: Dataset, result: CrossFitResult) -> np.ndarray:
    """Inverse covariance for every unit from the model of the opposite fold."""
    winv = np.empty((data.n, data.l, data.l))
    for q in (1, 2):
        other = result.folds[2 - q]      # folds[0] is fold 1
        idx = result.plan.fold(q)
        winv[idx] = other.covariance.inverse_for(data.subset(idx))
    return winv


def crossfit_sandwich(data: Dataset, result: CrossFitResult, spec: ModelSpec) -> SandwichCovariance:
    """Pooled sandwich with fold-matched covariance weights."""
    return sandwich(data, result.beta_hat, spec.link, result.support,
                    winv=fold_matched_inverses(data, result))


def crossfit_wald(data: Dataset, result: CrossFitResult, spec: ModelSpec,
                  hyp: HypothesisSpec | None = None, h_drift=None
                  ) -> tuple[WaldReport, SandwichCovariance]:
    hyp = hyp or spec.hypothesis
    if hyp is None:
        raise ValueError("no hypothesis given")
    sw = crossfit_sandwich(data, result, spec)
    m = list(hyp.m_set)
    report = wald(result.beta_hat[m], hyp, sw.block(m), data.n, h_drift)
    return report, sw


def working_independence_wald(data: Dataset, spec: ModelSpec, cfg: SolverConfig | None = None,
                              hyp: HypothesisSpec | None = None, h_drift=None
                              ) -> tuple[WaldReport, SandwichCovariance, FitResult]:
    """Comparator: full-sample identity-weighted fit and its sandwich Wald test."""
    hyp = hyp or spec.hypothesis
    if hyp is None:
        raise ValueError("no hypothesis given")
    fit = penalized_solve(data, spec, WorkingCovariance.identity(), cfg)
    support = tuple(sorted(set(spec.m_set) | set(fit.support)))
    sw = sandwich(data, fit.coef, spec.link, support)
    m = list(hyp.m_set)
    return wald(fit.coef[m], hyp, sw.block(m), data.n, h_drift), sw, fit
