"""Observation containers, link functions and mean/residual evaluation.

A unit ``i`` carries a response vector ``y`` of length ``l`` and a design
matrix ``x`` of shape ``(p, l)``; column ``k`` of ``x`` is the covariate
vector of measurement ``k``.  The conditional mean of measurement ``k`` is
``g(x[:, k] @ beta)`` for a known link ``g``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

if TYPE_CHECKING:
    from .inference import HypothesisSpec

ArrayFn = Callable[[np.ndarray], np.ndarray]

#: Default bound on covariate column norms before a warning is raised.
DESIGN_NORM_BOUND = 1e6


@dataclass(frozen=True)
class LinkFunction:
    """A link ``g`` together with its first three derivatives.

    User-supplied links are accepted as long as all four callables are
    vectorised over numpy arrays.
    """

    kind: str
    g: ArrayFn
    g1: ArrayFn
    g2: ArrayFn
    g3: ArrayFn

    def __repr__(self) -> str:
        return f"LinkFunction({self.kind!r})"


def _logit_g1(eta):
    mu = expit(eta)
    return mu * (1.0 - mu)


def _logit_g2(eta):
    mu = expit(eta)
    return mu * (1.0 - mu) * (1.0 - 2.0 * mu)


def _logit_g3(eta):
    mu = expit(eta)
    d1 = mu * (1.0 - mu)
    return d1 * (1.0 - 6.0 * d1)


IDENTITY = LinkFunction(
    "identity",
    g=lambda eta: np.asarray(eta, dtype=float) * 1.0,
    g1=lambda eta: np.ones_like(eta, dtype=float),
    g2=lambda eta: np.zeros_like(eta, dtype=float),
    g3=lambda eta: np.zeros_like(eta, dtype=float),
)
LOG = LinkFunction("log", g=np.exp, g1=np.exp, g2=np.exp, g3=np.exp)
LOGIT = LinkFunction("logit", g=expit, g1=_logit_g1, g2=_logit_g2, g3=_logit_g3)

LINKS = {"identity": IDENTITY, "log": LOG, "logit": LOGIT}


def get_link(link: str | LinkFunction) -> LinkFunction:
    if isinstance(link, LinkFunction):
        return link
    try:
        return LINKS[link]
    except KeyError:
        raise ValueError(
            f"unknown link {link!r}; expected one of {sorted(LINKS)}"
        ) from None


@dataclass(frozen=True)
class ObservationBlock:
    """One unit: response ``y`` (length ``l``) and design ``x`` (``p x l``)."""

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 1 or x.ndim != 2:
            raise ValueError("y must be a vector and x a (p, l) matrix")
        if x.shape[1] != y.shape[0]:
            raise ValueError(
                f"x has {x.shape[1]} columns but y has length {y.shape[0]}"
            )
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("observation contains non-finite entries")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def p(self) -> int:
        return self.x.shape[0]

    @property
    def l(self) -> int:  # noqa: E743
        return self.x.shape[1]

    def linear_predictor(self, beta) -> np.ndarray:
        beta = _check_beta(beta, self.p)
        return self.x.T @ beta


class Dataset:
    """A collection of units sharing ``(p, l)``.

    Units are stored stacked (``x`` has shape ``(n, p, l)`` and ``y`` has
    shape ``(n, l)``) so that blockwise weighting can be vectorised; the
    per-unit view is available through :attr:`blocks` and indexing.
    """

    def __init__(self, x, y, *, norm_bound: float = DESIGN_NORM_BOUND):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim != 3:
            raise ValueError("x must have shape (n, p, l)")
        if y.shape != (x.shape[0], x.shape[2]):
            raise ValueError(
                f"y has shape {y.shape}, expected {(x.shape[0], x.shape[2])}"
            )
        if x.shape[0] < 1 or x.shape[2] < 1:
            raise ValueError("need at least one unit and one measurement")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        col_norm = np.sqrt(np.max(np.sum(x * x, axis=1))) if x.size else 0.0
        if col_norm > norm_bound:
            warnings.warn(
                f"largest covariate column norm {col_norm:.3g} exceeds "
                f"{norm_bound:.3g}; consider rescaling",
                RuntimeWarning,
                stacklevel=2,
            )
        x.setflags(write=False)
        y.setflags(write=False)
        self.x = x
        self.y = y

    @classmethod
    def from_blocks(cls, blocks: Sequence[ObservationBlock]) -> "Dataset":
        if not blocks:
            raise ValueError("no blocks given")
        shapes = {b.x.shape for b in blocks}
        if len(shapes) != 1:
            raise ValueError(f"heterogeneous block dimensions: {sorted(shapes)}")
        return cls(np.stack([b.x for b in blocks]), np.stack([b.y for b in blocks]))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def l(self) -> int:  # noqa: E743
        return self.x.shape[2]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> ObservationBlock:
        return ObservationBlock(self.y[i], self.x[i])

    @property
    def blocks(self) -> Iterator[ObservationBlock]:
        return (self[i] for i in range(self.n))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=int)
        return Dataset(self.x[index], self.y[index])

    def linear_predictor(self, beta) -> np.ndarray:
        """``(n, l)`` array of ``X_ik' beta``."""
        beta = _check_beta(beta, self.p)
        return np.einsum("ipk,p->ik", self.x, beta)

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, p={self.p}, l={self.l})"


@dataclass(frozen=True)
class ParameterVector:
    """Coefficients with the unpenalized set and the nonzero support."""

    beta: np.ndarray
    m_set: tuple = ()
    support: tuple = field(default=None)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        m_set = tuple(sorted(int(j) for j in self.m_set))
        if any(j < 0 or j >= beta.size for j in m_set):
            raise ValueError("m_set indices out of range")
        support = tuple(int(j) for j in np.flatnonzero(beta))
        if self.support is not None and tuple(self.support) != support:
            raise ValueError("support inconsistent with beta")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "m_set", m_set)
        object.__setattr__(self, "support", support)

    @property
    def p(self) -> int:
        return self.beta.size

    @property
    def model_set(self) -> tuple:
        """Indices in the unpenalized set or the support, sorted."""
        return tuple(sorted(set(self.m_set) | set(self.support)))


@dataclass(frozen=True)
class ModelSpec:
    """Link, unpenalized index set and (optionally) the hypothesis to test."""

    link: LinkFunction = IDENTITY
    m_set: tuple = ()
    hypothesis: "HypothesisSpec | None" = None

    def __post_init__(self):
        object.__setattr__(self, "link", get_link(self.link))
        object.__setattr__(self, "m_set", tuple(sorted(int(j) for j in self.m_set)))


def _check_beta(beta, p: int) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (p,):
        raise ValueError(f"beta has shape {beta.shape}, expected ({p},)")
    return beta


def evaluate_mean(block: ObservationBlock, beta, link=IDENTITY) -> np.ndarray:
    """Componentwise mean ``g(X_ik' beta)``, ``k = 1..l``."""
    return get_link(link).g(block.linear_predictor(beta))


def residual(block: ObservationBlock, beta, link=IDENTITY) -> np.ndarray:
    return block.y - evaluate_mean(block, beta, link)


def mean_derivative_matrix(block: ObservationBlock, beta, link=IDENTITY) -> np.ndarray:
    """Diagonal ``l x l`` matrix of ``g'(X_ik' beta)``."""
    return np.diag(get_link(link).g1(block.linear_predictor(beta)))


def residuals(data: Dataset, beta, link=IDENTITY) -> np.ndarray:
    """Stacked residuals, shape ``(n, l)``."""
    return data.y - get_link(link).g(data.linear_predictor(beta))
