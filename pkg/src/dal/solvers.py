"""DAL-LS (closed form) and DAL-CEL (gradient descent) fits for one batch.

Both minimise ``loss(W) + alpha ||W - P||_F^2 + beta Tr(W^T X^T G X W)``
where ``P`` is the transported previous model (or zero without a prior),
``X`` holds all rows of the batch and the loss only sees labeled rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import log_softmax, softmax

from .transport import LinearModel, TransportPlan, transport_model

__all__ = [
    "SolverConfig",
    "FitResult",
    "SolverError",
    "fit_dal_ls",
    "fit_dal_cel",
    "fit_ridge",
    "fit_source_model",
    "predict",
    "predict_proba",
    "ls_objective",
    "ls_gradient",
    "cel_objective",
    "cel_gradient",
    "gradient_descent",
    "prior_weights",
    "empirical_risk",
]


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    loss: str = "ls"
    alpha: float = 1.0
    beta: float = 0.1
    step0: float = 0.1
    shrink: float = 0.5
    max_iter: int = 1000
    obj_tol: float = 1e-6
    knn_k: int = 10
    efmdi: str = "kme"
    epsilon: float = 1e-2
    augment_bias: bool = False

    def validate(self) -> None:
        if self.loss not in ("ls", "cel"):
            raise ValueError(f"loss must be 'ls' or 'cel', got {self.loss!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if self.step0 <= 0:
            raise ValueError("step0 must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.efmdi not in ("kme", "kde"):
            raise ValueError(f"efmdi must be 'kme' or 'kde', got {self.efmdi!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")

    def replace(self, **changes) -> "SolverConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return SolverConfig(**kw)


@dataclass(frozen=True)
class FitResult:
    model: LinearModel
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True

    @property
    def objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else float("nan")


# --- objectives -------------------------------------------------------------


def _graph_term(w, x_all, lap):
    if lap is None:
        return 0.0, np.zeros_like(w)
    g = lap.matrix if hasattr(lap, "matrix") else np.asarray(lap)
    xg = x_all.T @ (g @ x_all)
    return float(np.sum(w * (xg @ w))), 2.0 * xg @ w


def _center(a):
    return a - a.mean(axis=0, keepdims=True)


def ls_objective(w, x_l, y_l, prior, alpha, beta, x_all=None, lap=None) -> float:
    """``||H X_l W - H Y||^2 + alpha ||W - prior||^2 + beta Tr(W^T X^T G X W)``."""
    resid = _center(x_l) @ w - _center(y_l)
    val = np.sum(resid**2) + alpha * np.sum((w - prior) ** 2)
    if beta:
        val += beta * _graph_term(w, x_all, lap)[0]
    return float(val)


def ls_gradient(w, x_l, y_l, prior, alpha, beta, x_all=None, lap=None) -> np.ndarray:
    xc = _center(x_l)
    grad = 2.0 * xc.T @ (xc @ w - _center(y_l)) + 2.0 * alpha * (w - prior)
    if beta:
        grad += beta * _graph_term(w, x_all, lap)[1]
    return grad


def cel_objective(w, x_l, y_l, prior, alpha, beta, x_all=None, lap=None) -> float:
    """Summed cross-entropy over labeled rows plus the two regularisers."""
    val = -np.sum(y_l * log_softmax(x_l @ w, axis=1)) + alpha * np.sum((w - prior) ** 2)
    if beta:
        val += beta * _graph_term(w, x_all, lap)[0]
    return float(val)


def cel_gradient(w, x_l, y_l, prior, alpha, beta, x_all=None, lap=None) -> np.ndarray:
    grad = x_l.T @ (softmax(x_l @ w, axis=1) - y_l) + 2.0 * alpha * (w - prior)
    if beta:
        grad += beta * _graph_term(w, x_all, lap)[1]
    return grad


def gradient_descent(objective, gradient, w0, step0=0.1, shrink=0.5, max_iter=1000, obj_tol=1e-6):
    """Fixed-step descent with persistent step shrinking on rejected steps.

    Every attempted step counts as an iteration. A step that does not lower
    the objective is discarded and the step size is multiplied by
    ``shrink`` for good. Stops when an accepted step changes the objective
    by less than ``obj_tol`` or after ``max_iter`` attempts.

    Returns ``(w, trace, iterations, converged)`` where ``trace`` holds the
    objective at the start and after every accepted step.
    """
    w = np.array(w0, dtype=float)
    obj = objective(w)
    if not np.isfinite(obj):
        raise SolverError("non-finite objective at iteration 0")
    trace = [obj]
    step = step0
    for it in range(1, max_iter + 1):
        cand = w - step * gradient(w)
        new = objective(cand)
        if np.isfinite(new) and new < obj:
            delta = obj - new
            w, obj = cand, new
            trace.append(obj)
            if delta < obj_tol:
                return w, trace, it, True
        else:
            step *= shrink
            if step < 1e-300:
                raise SolverError(f"step size underflow at iteration {it}")
    return w, trace, max_iter, False


# --- fitting ----------------------------------------------------------------


def prior_weights(prior: LinearModel | None, plan: TransportPlan | None, d: int, c: int) -> np.ndarray:
    """The transported prior ``scale * T @ W_prev``, or zeros without a prior."""
    if (prior is None) != (plan is None):
        raise ValueError("prior and plan must be given together")
    if prior is None:
        return np.zeros((d, c))
    moved = transport_model(plan, prior).weights
    if moved.shape != (d, c):
        raise ValueError(f"transported prior has shape {moved.shape}, expected {(d, c)}")
    return moved


def _batch_arrays(batch, augment=False):
    x = np.asarray(batch.features, dtype=float)
    if augment:
        x = np.hstack([x, np.ones((x.shape[0], 1))])
    y = np.asarray(batch.labels_onehot, dtype=float)
    if len(batch.labeled_idx) == 0:
        raise ValueError(f"batch {batch.index} has no labeled rows")
    return x, x[batch.labeled_idx], y


def _spd_solve(a, b):
    try:
        return cho_solve(cho_factor(a), b)
    except LinAlgError:
        pass
    jitter = 1e-10 * np.eye(a.shape[0])
    try:
        return cho_solve(cho_factor(a + jitter), b)
    except LinAlgError:
        raise SolverError("singular system even after 1e-10 jitter") from None


def fit_dal_ls(batch, prior, plan, lap, cfg: SolverConfig) -> FitResult:
    """Closed-form DAL-LS fit with the bias recovered from the labeled means."""
    x, x_l, y = _batch_arrays(batch)
    d, c = x.shape[1], y.shape[1]
    p = prior_weights(prior, plan, d, c)
    xc = _center(x_l)
    lhs = xc.T @ xc + cfg.alpha * np.eye(d)
    if cfg.beta and lap is not None:
        lhs += cfg.beta * x.T @ lap.matrix @ x
    w = _spd_solve(lhs, xc.T @ _center(y) + cfg.alpha * p)
    bias = y.mean(axis=0) - x_l.mean(axis=0) @ w
    obj = ls_objective(w, x_l, y, p, cfg.alpha, cfg.beta, x, lap)
    return FitResult(LinearModel(w, bias), [obj], 1, True)


def fit_dal_cel(batch, prior, plan, lap, cfg: SolverConfig) -> FitResult:
    """Gradient-descent DAL-CEL fit, warm-started at the transported prior."""
    x, x_l, y = _batch_arrays(batch, cfg.augment_bias)
    d0 = batch.features.shape[1]
    c = y.shape[1]
    p = prior_weights(prior, plan, d0, c)
    if cfg.augment_bias:
        p = np.vstack([p, np.zeros((1, c))])
    args = (x_l, y, p, cfg.alpha, cfg.beta, x, lap)
    if cfg.beta and lap is not None:
        # X^T G X is fixed for the whole fit
        xg = x.T @ (lap.matrix @ x)

        def obj(w):
            return cel_objective(w, x_l, y, p, cfg.alpha, 0.0) + cfg.beta * float(np.sum(w * (xg @ w)))

        def grad(w):
            return cel_gradient(w, x_l, y, p, cfg.alpha, 0.0) + 2.0 * cfg.beta * xg @ w
    else:
        def obj(w):
            return cel_objective(w, *args)

        def grad(w):
            return cel_gradient(w, *args)

    w, trace, iters, ok = gradient_descent(obj, grad, p, cfg.step0, cfg.shrink, cfg.max_iter, cfg.obj_tol)
    if cfg.augment_bias:
        model = LinearModel(w[:-1], w[-1])
    else:
        model = LinearModel(w, np.zeros(c))
    return FitResult(model, trace, iters, ok)


def fit_ridge(batch, alpha: float) -> FitResult:
    """Multi-class ridge on one-hot targets with an unpenalised bias."""
    return fit_dal_ls(batch, None, None, None, SolverConfig(alpha=alpha, beta=0.0))


def fit_source_model(batch, alphas=None, folds: int = 5, seed: int = 0) -> tuple[FitResult, float]:
    """Ridge on the initiation batch with alpha picked by k-fold accuracy.

    Ties keep the smaller alpha. Returns the refit on the whole batch and the
    chosen alpha.
    """
    from .dataio import TaskBatch

    alphas = list(alphas) if alphas is not None else [10.0**k for k in range(-3, 4)]
    x = batch.features[batch.labeled_idx]
    y = batch.labels_onehot
    n = len(x)
    folds = max(2, min(folds, n))
    order = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(order, folds)
    best_alpha, best_acc = alphas[0], -1.0
    for a in alphas:
        hits = 0
        for k in range(folds):
            test = parts[k]
            train = np.concatenate([parts[j] for j in range(folds) if j != k])
            sub = TaskBatch(0, x[train], np.arange(len(train)), y[train])
            model = fit_ridge(sub, a).model
            hits += int(np.sum(predict(model, x[test]) == y[test].argmax(axis=1)))
        acc = hits / n
        if acc > best_acc:
            best_alpha, best_acc = a, acc
    return fit_ridge(batch, best_alpha), best_alpha


def predict_proba(model: LinearModel, features) -> np.ndarray:
    return softmax(_scores(model, features), axis=1)


def _scores(model, features):
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.d:
        raise ValueError(f"expected {model.d} features, got shape {x.shape}")
    return x @ model.weights + model.bias


def predict(model: LinearModel, features) -> np.ndarray:
    """Arg-max class per row; ``np.argmax`` already resolves ties to the lower index."""
    return np.argmax(_scores(model, features), axis=1)


def empirical_risk(model_weights, batch, loss: str = "ls") -> float:
    """Mean per-row loss of a weight matrix on the labeled rows of ``batch``."""
    x_l = batch.features[batch.labeled_idx]
    y = batch.labels_onehot
    w = np.asarray(model_weights, dtype=float)
    if loss == "cel":
        return float(-np.sum(y * log_softmax(x_l @ w, axis=1)) / len(y))
    resid = _center(x_l) @ w - _center(y)
    return float(np.sum(resid**2) / len(y))
