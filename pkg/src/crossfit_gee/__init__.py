"""Penalized estimating equations with cross-fitted covariance estimation."""

from .crossfit import (
    CrossfitConfig,
    CrossFitResult,
    FoldLeakError,
    FoldPlan,
    crossfit,
    crossfit_refit,
    crossfit_sandwich,
    crossfit_wald,
    split,
    working_independence_wald,
)
from .inference import (
    HypothesisSpec,
    SandwichCovariance,
    WaldReport,
    chi2_cdf,
    chi2_quantile,
    chi2_sf,
    noncentrality,
    power_compare,
    sandwich,
    wald,
)
from .kernel import CovarianceModel, bandwidth_rule, fit_covariance_model, sup_error
from .lasso import LassoProblem, LassoSolution, lasso_bic, solve_lasso
from .model import (
    IDENTITY,
    LOG,
    LOGIT,
    Dataset,
    LinkFunction,
    ModelSpec,
    ObservationBlock,
    ParameterVector,
    evaluate_mean,
    get_link,
    residuals,
)
from .penalty import PenaltyConfig, kkt_interval, partial_penalty_gradient, penalty_derivative
from .screening import BasisFamily, ScreeningResult, critical_value, score_statistic, screen
from .simulate import ScenarioConfig, generate, run_experiment
from .solver import (
    FitResult,
    SolverConfig,
    WorkingCovariance,
    estimating_function,
    estimating_jacobian,
    penalized_solve,
)

__version__ = "0.1.0"
