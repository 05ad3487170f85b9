"""Computable quantities from the generalisation analysis.

* :func:`rademacher_u2` -- the kernel bound term
  ``U^2 = Tr(K_ll)/a - b Tr(J^T (I + b M)^-1 J)`` with
  ``J = G^T K_L^T / a`` and ``M = G^T K G / a``; ``U/l`` and ``U/(2^(1/4) l)``
  bracket the empirical Rademacher complexity of one class column.
* :func:`delta_beta` / :func:`delta_beta_limit` -- the reduction that
  unlabeled data buys, and its value as beta grows without bound.
* :func:`trajectory_length` -- summed per-step weight-column distances along
  the sequence of fitted models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

__all__ = [
    "BoundInputs",
    "DiagnosticError",
    "rademacher_u2",
    "rademacher_bracket",
    "delta_beta",
    "delta_beta_limit",
    "trajectory_length",
    "gaussian_kernel",
    "laplacian_factor",
    "transformed_params",
    "concentration_tail",
    "RISK_FLOOR",
]

RISK_FLOOR = 1e-8


class DiagnosticError(ValueError):
    pass


@dataclass(frozen=True)
class BoundInputs:
    """Kernel over all batch rows, the labeled rows, a Laplacian factor and the
    transformed regularisation weights (alpha_t > 0, beta_t >= 0)."""

    kernel_full: np.ndarray
    labeled_idx: np.ndarray
    graph_factor: np.ndarray
    alpha_t: float
    beta_t: float

    def __post_init__(self):
        k = np.asarray(self.kernel_full, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise DiagnosticError("kernel must be square")
        if not np.allclose(k, k.T, atol=1e-8):
            raise DiagnosticError("kernel must be symmetric")
        if np.linalg.eigvalsh(0.5 * (k + k.T)).min() < -1e-8 * max(1.0, np.abs(k).max()):
            raise DiagnosticError("kernel must be positive semidefinite")
        if not self.alpha_t > 0:
            raise DiagnosticError("alpha_t must be positive")
        if self.beta_t < 0:
            raise DiagnosticError("beta_t must be nonnegative")
        g = np.asarray(self.graph_factor, dtype=float)
        if g.ndim != 2 or g.shape[0] != k.shape[0]:
            raise DiagnosticError("graph factor must have one row per kernel row")
        object.__setattr__(self, "kernel_full", k)
        object.__setattr__(self, "graph_factor", g)
        object.__setattr__(self, "labeled_idx", np.asarray(self.labeled_idx, dtype=int))

    @property
    def l(self) -> int:
        return len(self.labeled_idx)

    @property
    def k_ll(self) -> np.ndarray:
        return self.kernel_full[np.ix_(self.labeled_idx, self.labeled_idx)]

    @property
    def k_l(self) -> np.ndarray:
        """Labeled rows against every row, ``(K_ll K_lu)`` up to column order."""
        return self.kernel_full[self.labeled_idx]

    @property
    def j(self) -> np.ndarray:
        return self.graph_factor.T @ self.k_l.T / self.alpha_t

    @property
    def m(self) -> np.ndarray:
        g = self.graph_factor
        return g.T @ self.kernel_full @ g / self.alpha_t

    def with_beta(self, beta_t: float) -> "BoundInputs":
        return BoundInputs(self.kernel_full, self.labeled_idx, self.graph_factor, self.alpha_t, beta_t)


def delta_beta(inp: BoundInputs, beta_t: float | None = None) -> float:
    """``b Tr(J^T (I + b M)^-1 J)``; zero at b = 0 and nondecreasing in b."""
    b = inp.beta_t if beta_t is None else float(beta_t)
    if b == 0.0:
        return 0.0
    m = inp.m
    j = inp.j
    sys = np.eye(m.shape[0]) + b * m
    try:
        sol = np.linalg.solve(sys, j)
    except np.linalg.LinAlgError:
        raise DiagnosticError("I + beta M is singular") from None
    return float(b * np.sum(j * sol))


def rademacher_u2(inp: BoundInputs) -> float:
    u2 = float(np.trace(inp.k_ll)) / inp.alpha_t - delta_beta(inp)
    # the reduction never exceeds the first term; tiny negatives are round-off
    assert u2 >= -1e-9 * max(1.0, float(np.trace(inp.k_ll)) / inp.alpha_t), u2
    return max(u2, 0.0)


def rademacher_bracket(inp: BoundInputs) -> tuple[float, float]:
    """Lower and upper ends ``U/(2^(1/4) l)`` and ``U/l``."""
    u = math.sqrt(rademacher_u2(inp))
    return u / (2 ** 0.25 * inp.l), u / inp.l


def delta_beta_limit(inp: BoundInputs) -> float:
    """``Tr(J^T M^-1 J)``, the beta -> infinity limit of :func:`delta_beta`."""
    m = inp.m
    j = inp.j
    if m.size == 0 or np.linalg.matrix_rank(m) < m.shape[0]:
        raise DiagnosticError("limit undefined; M rank-deficient")
    return float(np.sum(j * np.linalg.solve(m, j)))


def trajectory_length(models, times=None) -> tuple[np.ndarray, float]:
    """Per-class-column path length ``sum_k ||w_j(t_k) - w_j(t_{k-1})||`` and its total.

    ``times`` only has to be strictly increasing; the step widths cancel.
    """
    ws = [np.asarray(getattr(m, "weights", m), dtype=float) for m in models]
    if times is not None:
        times = np.asarray(times, dtype=float)
        if len(times) != len(ws):
            raise ValueError(f"{len(ws)} models but {len(times)} time points")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
    if len(ws) < 2:
        c = ws[0].shape[1] if ws else 0
        return np.zeros(c), 0.0
    per = np.zeros(ws[0].shape[1])
    for prev, cur in zip(ws[:-1], ws[1:]):
        per += np.linalg.norm(cur - prev, axis=0)
    return per, float(per.sum())


def gaussian_kernel(x: np.ndarray, width: float | None = None) -> np.ndarray:
    """``exp(-||x_i - x_j||^2 / (2 width^2))``, width by the median heuristic."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 2:
        return np.ones((x.shape[0], x.shape[0]))
    dist = pdist(x)
    if width is None:
        nz = dist[dist > 0]
        width = float(np.median(nz)) if nz.size else 1.0
    return np.exp(-squareform(dist) ** 2 / (2.0 * width**2))


def laplacian_factor(lap: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """``G_f`` with ``G_f G_f^T = L`` from the eigendecomposition of ``L``.

    Eigenvalues below ``rtol * max`` (the constant vectors of each connected
    component, plus round-off) are dropped, so ``G_f`` has full column rank.
    """
    lap = np.asarray(getattr(lap, "matrix", lap), dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (lap + lap.T))
    top = max(vals.max(initial=0.0), 0.0)
    keep = vals > rtol * top if top > 0 else np.zeros_like(vals, dtype=bool)
    return vecs[:, keep] * np.sqrt(vals[keep])


def transformed_params(alpha: float, beta: float, class_count: int, prior_risk: float):
    """``(C alpha / R, C beta / R)`` with R floored at 1e-8."""
    r = max(float(prior_risk), RISK_FLOOR)
    return class_count * alpha / r, class_count * beta / r


def concentration_tail(l: int, bound: float = 10.0, delta: float = 0.05, coef: float = 3.0) -> float:
    """``coef * B * sqrt(log(1/delta) / (2 l))``; coef 3 for the per-task bound, 1 for the trajectory one."""
    return coef * bound * math.sqrt(math.log(1.0 / delta) / (2.0 * l))
