"""Entropic optimal transport between feature sets, and model transport.

The plan minimises ``<T, C> + eps * sum T_ij (log T_ij - 1)`` over couplings
with fixed row and column marginals. It is found by alternating Sinkhorn
scaling carried out on the dual potentials in the log domain, so tiny
``eps`` never overflows. Small ``eps`` is reached through a geometric
eps-annealing warm start; the final fixed point is unchanged by it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = ["TransportPlan", "LinearModel", "sinkhorn", "transport_model", "plan_for_cost"]


@dataclass(frozen=True)
class LinearModel:
    """Weights (features x classes) and a per-class bias."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValueError("weights must be a (d, C) matrix")
        b = np.zeros(w.shape[1]) if self.bias is None else np.asarray(self.bias, dtype=float)
        if b.shape != (w.shape[1],):
            raise ValueError("bias must have one entry per class")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("model has non-finite entries")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    @property
    def class_count(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, d: int, c: int) -> "LinearModel":
        return cls(np.zeros((d, c)), np.zeros(c))


@dataclass(frozen=True)
class TransportPlan:
    coupling: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    epsilon: float
    scale: float
    cost_scale: float = 1.0
    iterations: int = 0
    violation: float = 0.0
    converged: bool = True

    @property
    def d(self) -> int:
        return self.coupling.shape[0]

    def transport_cost(self, cost) -> float:
        c = np.asarray(getattr(cost, "values", cost), dtype=float)
        return float(np.sum(self.coupling * c))


def _check_marginal(p, size, name):
    p = np.full(size, 1.0 / size) if p is None else np.asarray(p, dtype=float)
    if p.shape != (size,):
        raise ValueError(f"{name} marginal must have length {size}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} marginal is not a probability vector")
    return p


def _violation(log_t, log_a, log_b):
    t = np.exp(log_t)
    return max(np.max(np.abs(t.sum(axis=1) - np.exp(log_a))),
               np.max(np.abs(t.sum(axis=0) - np.exp(log_b))))


def _newton_polish(f, g, c, log_a, log_b, eps, tol, steps=30):
    """Damped Newton ascent on the entropic dual.

    Converges to the same fixed point as the scaling iterations but
    quadratically, which matters when eps is tiny and the plan is nearly a
    permutation (components joined only by ~1e-6 links make plain scaling
    crawl). The Hessian is singular along the (1, -1) gauge direction and
    nearly so between weakly linked blocks, hence the least-squares solve.
    """
    a, b = np.exp(log_a), np.exp(log_b)
    n, m = c.shape

    def dual(f_, g_):
        with np.errstate(over="ignore"):
            return f_ @ a + g_ @ b - eps * np.exp(logsumexp((f_[:, None] + g_[None, :] - c) / eps))

    def state(f_, g_):
        t = np.exp((f_[:, None] + g_[None, :] - c) / eps)
        ra, cb = t.sum(axis=1), t.sum(axis=0)
        return t, ra, cb, max(np.max(np.abs(ra - a)), np.max(np.abs(cb - b)))

    t, ra, cb, viol = state(f, g)
    best = (f, g, viol)
    val = dual(f, g)
    for _ in range(steps):
        if viol < tol:
            break
        grad = np.concatenate([a - ra, b - cb])
        hess = np.block([[np.diag(ra), t], [t.T, np.diag(cb)]])
        step = eps * np.linalg.lstsq(hess, grad, rcond=1e-14)[0]
        if not np.all(np.isfinite(step)):
            break
        lr = 1.0
        while lr > 1e-6:
            fn, gn = f + lr * step[:n], g + lr * step[n:]
            vn = dual(fn, gn)
            if np.isfinite(vn) and vn >= val - 1e-12 * abs(val):
                break
            lr *= 0.5
        else:
            break
        f, g, val = fn, gn, vn
        t, ra, cb, viol = state(f, g)
        if viol < best[2]:
            best = (f, g, viol)
    return best


def sinkhorn(cost, row_marginal=None, col_marginal=None, epsilon: float = 1e-2,
             max_iter: int = 5000, tol: float = 1e-9, normalize: bool = True) -> TransportPlan:
    """Entropic OT plan for ``cost`` (array or :class:`~dal.efmdi.CostMatrix`).

    With ``normalize`` the cost is divided by its largest entry first, so
    ``epsilon`` is relative to a unit-range cost. The returned plan records
    the final marginal violation; hitting ``max_iter`` sets ``converged``
    to False rather than raising.
    """
    c = np.array(getattr(cost, "values", cost), dtype=float)
    if c.ndim != 2:
        raise ValueError("cost must be a matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost has non-finite entries")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n, m = c.shape
    a = _check_marginal(row_marginal, n, "row")
    b = _check_marginal(col_marginal, m, "column")

    scale = 1.0
    if normalize:
        top = float(np.max(np.abs(c)))
        if top > 0:
            scale = top
            c = c / top

    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(n)
    g = np.zeros(m)

    # anneal eps geometrically from the cost range down to the target
    span = max(float(np.ptp(c)), epsilon)
    stages = []
    e = span
    while e > epsilon:
        stages.append(e)
        e /= 10.0
    stages.append(epsilon)

    it = 0
    viol = np.inf
    for k, eps in enumerate(stages):
        last = k == len(stages) - 1
        budget = max_iter - it if last else min(200, max_iter - it)
        polish_at = it + 50
        for _ in range(budget):
            it += 1
            f = eps * (log_a - logsumexp((g[None, :] - c) / eps, axis=1))
            g = eps * (log_b - logsumexp((f[:, None] - c) / eps, axis=0))
            if it % 10 == 0 or last:
                log_t = (f[:, None] + g[None, :] - c) / eps
                # column sums are exact right after the g-update
                viol = float(np.max(np.abs(np.exp(logsumexp(log_t, axis=1)) - a)))
                if viol < (tol if last else 1e-3 * eps):
                    break
                if last and it >= polish_at:
                    f, g, viol = _newton_polish(f, g, c, log_a, log_b, eps, tol)
                    polish_at = it + 500
                    if viol < tol:
                        break
        if it >= max_iter:
            break

    log_t = (f[:, None] + g[None, :] - c) / epsilon
    viol = _violation(log_t, log_a, log_b)
    return TransportPlan(np.exp(log_t), a, b, float(epsilon), float(n), scale, it, viol, viol < tol)


def transport_model(plan: TransportPlan, prev_model: LinearModel) -> LinearModel:
    """Map the previous model into current feature indexing: ``scale * T @ W``."""
    if plan.coupling.shape[1] != prev_model.d:
        raise ValueError(f"plan has {plan.coupling.shape[1]} source features, model has {prev_model.d}")
    return LinearModel(plan.scale * plan.coupling @ prev_model.weights, prev_model.bias.copy())


def plan_for_cost(cost, epsilon: float = 1e-2, **kw) -> TransportPlan:
    """Uniform-marginal plan; shorthand used by the task-flow runner."""
    return sinkhorn(cost, None, None, epsilon, **kw)
