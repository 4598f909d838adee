"""Matrix-valued Nadaraya-Watson estimate of the conditional covariance.

``Sigma(x) = sum_i w_i(x) R_i R_i'`` with Gaussian product-kernel weights
``w_i(x)`` over the vectorised active covariates ``z_i = vec(X_{i,A})``.
All coordinates share one bandwidth factor (scaled by the per-coordinate
sample standard deviation), so every estimate is a convex combination of
PSD matrices; a small jitter keeps it invertible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .model import Dataset


def bandwidth_rule(n: int, nu: float = 1.0, l: int = 1, a_size: int = 1,  # noqa: E741
                   c_h: float = 1.0) -> float:
    """``c_h * n ** (-1 / (4 nu + 2 l |A|))``."""
    if n < 2:
        raise ValueError("need n >= 2")
    if not 0 < nu <= 1:
        raise ValueError("nu must lie in (0, 1]")
    if a_size < 1 or l < 1:
        raise ValueError("l and a_size must be >= 1")
    return float(c_h * n ** (-1.0 / (4.0 * nu + 2.0 * l * a_size)))


def active_features(data: Dataset, active_set) -> np.ndarray:
    """``vec(X_{i,A})`` for every unit, shape ``(n, l |A|)``."""
    idx = np.asarray(active_set, dtype=int)
    return data.x[:, idx, :].reshape(data.n, -1)


@dataclass(frozen=True)
class CovarianceModel:
    """Stored training pairs plus bandwidths; immutable once built.

    ``train_index`` and ``fold_id`` record where the pairs came from;
    ``beta_source`` records the coefficient vector that produced the
    residuals.
    """

    active_set: tuple
    bandwidth: np.ndarray
    z: np.ndarray
    m: np.ndarray
    jitter: float = 1e-6
    fold_id: int | None = None
    train_index: tuple = ()
    beta_source: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        m = np.asarray(self.m, dtype=float)
        if z.ndim != 2 or m.ndim != 3 or z.shape[0] != m.shape[0] or z.shape[0] == 0:
            raise ValueError("need matching, nonempty training pairs")
        bw = np.broadcast_to(np.asarray(self.bandwidth, dtype=float), (z.shape[1],)).copy()
        if np.any(bw <= 0):
            raise ValueError("bandwidth must be positive")
        for a in (z, m, bw):
            a.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "bandwidth", bw)
        object.__setattr__(self, "active_set", tuple(int(j) for j in self.active_set))
        object.__setattr__(self, "train_index", tuple(int(i) for i in self.train_index))

    @property
    def l(self) -> int:  # noqa: E743
        return self.m.shape[1]

    @property
    def degenerate(self) -> bool:
        """True when no active covariates were selected (constant estimate)."""
        return self.z.shape[1] == 0

    def weights(self, xq) -> np.ndarray:
        """Normalised kernel weights, shape ``(m, n_train)``."""
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        if self.degenerate:
            return np.full((xq.shape[0], self.z.shape[0]), 1.0 / self.z.shape[0])
        if xq.shape[1] != self.z.shape[1]:
            raise ValueError(f"query dimension {xq.shape[1]} != {self.z.shape[1]}")
        logk = -0.5 * cdist(xq / self.bandwidth, self.z / self.bandwidth, "sqeuclidean")
        logw = logk - logsumexp(logk, axis=1, keepdims=True)
        return np.exp(logw)

    def raw_many(self, xq) -> np.ndarray:
        """Weighted averages without jitter, shape ``(m, l, l)``."""
        w = self.weights(xq)
        bad = ~np.isfinite(w).all(axis=1)
        out = np.einsum("qi,ikm->qkm", np.where(np.isfinite(w), w, 0.0), self.m)
        if bad.any():
            warnings.warn("kernel weights not finite; using nearest neighbour",
                          RuntimeWarning, stacklevel=2)
            xq = np.atleast_2d(np.asarray(xq, dtype=float))
            nn = np.argmin(cdist(xq[bad], self.z), axis=1)
            out[bad] = self.m[nn]
        return out

    def _regularise(self, s):
        s = 0.5 * (s + np.swapaxes(s, -1, -2))
        vals = np.linalg.eigvalsh(s)
        floor = self.jitter * np.maximum(np.trace(s, axis1=-2, axis2=-1) / self.l, 1e-300)
        lift = np.where(vals[..., 0] < floor, floor - vals[..., 0], 0.0)
        return s + lift[..., None, None] * np.eye(self.l), lift > 0

    def evaluate_many(self, xq, return_flags=False):
        s, flags = self._regularise(self.raw_many(xq))
        return (s, flags) if return_flags else s

    def evaluate(self, x, return_flags=False):
        """SPD estimate at a single query point ``x`` (length ``l |A|``)."""
        s, flags = self.evaluate_many(np.reshape(x, (1, -1)), return_flags=True)
        return (s[0], bool(flags[0])) if return_flags else s[0]

    def inverse_many(self, xq) -> np.ndarray:
        inv = np.linalg.inv(self.evaluate_many(xq))
        return 0.5 * (inv + np.swapaxes(inv, -1, -2))

    def inverse_at(self, x) -> np.ndarray:
        return self.inverse_many(np.reshape(x, (1, -1)))[0]

    def features(self, data: Dataset) -> np.ndarray:
        return active_features(data, self.active_set)

    def inverse_for(self, data: Dataset) -> np.ndarray:
        """Per-unit inverse covariances for every unit of ``data``."""
        return self.inverse_many(self.features(data))


def fit_covariance_model(data: Dataset, resid, active_set, *, nu: float = 1.0,
                         c_h: float = 1.0, jitter: float = 1e-6, fold_id=None,
                         train_index=None, beta_source=None) -> CovarianceModel:
    """Build a :class:`CovarianceModel` from units and their residuals."""
    resid = np.asarray(resid, dtype=float)
    if resid.shape != (data.n, data.l):
        raise ValueError(f"residuals have shape {resid.shape}, expected {(data.n, data.l)}")
    active_set = tuple(sorted(int(j) for j in active_set))
    z = active_features(data, active_set)
    if active_set:
        sd = z.std(axis=0, ddof=1) if data.n > 1 else np.ones(z.shape[1])
        sd = np.where(sd > 0, sd, 1.0)
        bw = bandwidth_rule(data.n, nu, data.l, len(active_set), c_h) * sd
    else:
        bw = np.ones(0)
    m = np.einsum("ik,im->ikm", resid, resid)
    if train_index is None:
        train_index = range(data.n)
    return CovarianceModel(active_set, bw, z, m, jitter, fold_id, tuple(train_index),
                           None if beta_source is None else np.asarray(beta_source, dtype=float))


def sup_error(model: CovarianceModel, truth, grid) -> float:
    """Largest Frobenius distance between the estimate and ``truth(x)`` on ``grid``."""
    grid = [np.asarray(g, dtype=float) for g in grid]
    if not grid:
        return 0.0
    est = model.raw_many(np.vstack([g.reshape(1, -1) for g in grid]))
    return float(max(np.linalg.norm(e - truth(g), "fro") for e, g in zip(est, grid)))
