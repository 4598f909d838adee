"""SCAD and MCP penalty derivatives and the partially penalized subgradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_A = {"scad": 3.7, "mcp": 3.0}


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty family, level ``lam`` and shape constant ``a``.

    ``a`` defaults to 3.7 for SCAD and 3.0 for MCP.
    """

    kind: str = "scad"
    lam: float = 0.0
    a: float | None = None

    def __post_init__(self):
        if self.kind not in DEFAULT_A:
            raise ValueError(f"unknown penalty {self.kind!r}")
        a = DEFAULT_A[self.kind] if self.a is None else float(self.a)
        object.__setattr__(self, "a", a)
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and nonnegative, got {self.lam}")
        if self.kind == "scad" and a <= 2:
            raise ValueError(f"SCAD requires a > 2, got {a}")
        if self.kind == "mcp" and a <= 1:
            raise ValueError(f"MCP requires a > 1, got {a}")

    def with_lambda(self, lam: float) -> "PenaltyConfig":
        return PenaltyConfig(self.kind, float(lam), self.a)


def penalty_derivative(t, cfg: PenaltyConfig):
    """Derivative of the penalty evaluated at ``|t|``.

    SCAD: ``lam * [1{|t| <= lam} + (a lam - |t|)_+ / ((a - 1) lam) 1{|t| > lam}]``.
    MCP: ``(lam - |t| / a)_+``.
    """
    t = np.abs(np.asarray(t, dtype=float))
    lam, a = cfg.lam, cfg.a
    if lam == 0:
        return np.zeros_like(t)[()]
    if cfg.kind == "scad":
        out = np.where(t <= lam, lam, np.maximum(a * lam - t, 0.0) / (a - 1.0))
    else:
        out = np.maximum(lam - t / a, 0.0)
    return out[()]


def penalty_second_derivative(t, cfg: PenaltyConfig):
    """Derivative of :func:`penalty_derivative` in ``|t|`` (zero at kinks)."""
    t = np.abs(np.asarray(t, dtype=float))
    lam, a = cfg.lam, cfg.a
    if lam == 0:
        return np.zeros_like(t)[()]
    if cfg.kind == "scad":
        out = np.where((t > lam) & (t < a * lam), -1.0 / (a - 1.0), 0.0)
    else:
        out = np.where(t < a * lam, -1.0 / a, 0.0)
    return out[()]


def _penalized_mask(p: int, m_set) -> np.ndarray:
    mask = np.ones(p, dtype=bool)
    m = np.asarray(sorted(m_set), dtype=int)
    if m.size and (m.min() < 0 or m.max() >= p):
        raise ValueError(f"m_set {tuple(m)} not within 0..{p - 1}")
    mask[m] = False
    return mask


def partial_penalty_gradient(beta, m_set, cfg: PenaltyConfig) -> np.ndarray:
    """``sign(beta_j) * rho'(beta_j) * 1{j not in M}``.

    At ``beta_j == 0`` the subdifferential is ``[-lam, lam]``; the entry is
    set to the bound ``lam`` (a magnitude marker, see :func:`kkt_interval`).
    """
    beta = np.asarray(beta, dtype=float)
    mask = _penalized_mask(beta.size, m_set)
    grad = np.sign(beta) * penalty_derivative(beta, cfg)
    grad = np.where(beta == 0, cfg.lam, grad)
    return np.where(mask, grad, 0.0)


def kkt_interval(beta, m_set, cfg: PenaltyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper ends of the penalty subdifferential at ``beta``.

    Degenerate (a point) where ``beta_j != 0`` or ``j`` is unpenalized,
    ``[-lam, lam]`` at penalized zeros.
    """
    beta = np.asarray(beta, dtype=float)
    mask = _penalized_mask(beta.size, m_set)
    point = np.where(mask, np.sign(beta) * penalty_derivative(beta, cfg), 0.0)
    at_zero = mask & (beta == 0)
    lo = np.where(at_zero, -cfg.lam, point)
    hi = np.where(at_zero, cfg.lam, point)
    return lo, hi

