"""Drive a fit variant across a task stream and collect per-task records."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import TaskStream, standardize_stream
from .diagnostics import (
    BoundInputs,
    concentration_tail,
    delta_beta,
    gaussian_kernel,
    laplacian_factor,
    rademacher_bracket,
    rademacher_u2,
    transformed_params,
)
from .efmdi import evolving_cost
from .manifold import build_laplacian
from .solvers import (
    FitResult,
    SolverConfig,
    empirical_risk,
    fit_dal_cel,
    fit_dal_ls,
    fit_source_model,
    predict,
    prior_weights,
)
from .transport import sinkhorn

__all__ = ["RunRecord", "FlowResult", "TaskError", "run_task_flow", "VARIANTS"]

log = logging.getLogger(__name__)

VARIANTS = ("dal", "ls_ot", "ls_g", "ridge")


class TaskError(RuntimeError):
    """A component failure, tagged with the task index it happened on."""

    def __init__(self, task: int, cause: Exception):
        super().__init__(f"task {task}: {type(cause).__name__}: {cause}")
        self.task = task


@dataclass
class RunRecord:
    variant: str
    seed: int
    task: int
    accuracy: float
    labeled_count: int
    unlabeled_count: int
    iterations: int
    converged: bool
    final_objective: float
    prior_risk: float | None = None
    alpha_t: float | None = None
    beta_t: float | None = None
    trace_kll: float | None = None
    u2: float | None = None
    delta_beta: float | None = None
    rademacher_lower: float | None = None
    rademacher_upper: float | None = None
    bound_tail: float | None = None
    trajectory_increment: float = 0.0
    ot_violation: float | None = None
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowResult:
    records: list
    models: list  # task 0 source model first
    fits: list = field(default_factory=list)  # FitResult per task >= 1

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _variant_settings(variant: str, cfg: SolverConfig):
    """(use_prior, beta) for each ablation."""
    if variant == "dal":
        return True, cfg.beta
    if variant == "ls_ot":
        return True, 0.0
    if variant == "ls_g":
        return False, cfg.beta
    if variant == "ridge":
        return False, 0.0
    raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def _bound_record(batch, prior_w, cfg, beta, lap, tail_bound, tail_delta):
    c = batch.class_count
    risk = empirical_risk(prior_w, batch, cfg.loss)
    out = {"prior_risk": risk}
    if cfg.alpha <= 0:
        return out
    a_t, b_t = transformed_params(cfg.alpha, beta, c, risk)
    factor = laplacian_factor(lap.matrix) if lap is not None else np.zeros((batch.n, 0))
    inp = BoundInputs(gaussian_kernel(batch.features), batch.labeled_idx, factor, a_t, b_t)
    lo, hi = rademacher_bracket(inp)
    out.update(alpha_t=a_t, beta_t=b_t, trace_kll=float(np.trace(inp.k_ll)), u2=rademacher_u2(inp),
               delta_beta=delta_beta(inp), rademacher_lower=lo, rademacher_upper=hi,
               bound_tail=concentration_tail(inp.l, tail_bound, tail_delta))
    return out


def run_task_flow(stream: TaskStream, cfg: SolverConfig, variant: str = "dal", seed: int = 0,
                  preprocess: str = "center", diagnostics: bool = True,
                  tail_bound: float = 10.0, tail_delta: float = 0.05) -> FlowResult:
    """Train on batch 0, then adapt batch by batch, scoring each batch's unlabeled rows.

    ``ls_ot`` drops the graph term, ``ls_g`` drops the transported prior
    (keeping plain shrinkage toward zero), ``ridge`` drops both.

    ``preprocess`` is ``"center"`` (subtract batch-0 means), ``"zscore"``
    (also divide by batch-0 stds) or ``"none"``. Per-column scaling changes
    which columns look alike to the feature-marginal cost, so it is opt-in.
    """
    cfg.validate()
    use_prior, beta = _variant_settings(variant, cfg)
    if len(stream) < 2:
        raise ValueError("stream needs at least two batches")
    b0 = stream[0]
    if len(b0.labeled_idx) != b0.n:
        raise ValueError("batch 0 must be fully labeled")
    if preprocess not in ("center", "zscore", "none"):
        raise ValueError(f"unknown preprocess mode {preprocess!r}")
    if preprocess != "none":
        stream = standardize_stream(stream, scale=preprocess == "zscore")
    fit = fit_dal_cel if cfg.loss == "cel" else fit_dal_ls
    run_cfg = cfg.replace(beta=beta)

    source, _ = fit_source_model(stream[0], seed=seed)
    model = source.model
    if cfg.loss == "cel":
        model = type(model)(model.weights, np.zeros(model.class_count))
    models, fits, records = [model], [], []
    for t in range(1, len(stream)):
        batch, prev = stream[t], stream[t - 1]
        start = time.perf_counter()
        try:
            plan = None
            if use_prior:
                cost = evolving_cost(batch, prev, cfg.efmdi)
                plan = sinkhorn(cost, epsilon=cfg.epsilon)
            lap = None
            if beta > 0:
                lap = build_laplacian(batch.features, min(cfg.knn_k, batch.n - 1))
            result: FitResult = fit(batch, model if use_prior else None, plan, lap, run_cfg)
        except Exception as exc:
            raise TaskError(t, exc) from exc
        elapsed = 1000.0 * (time.perf_counter() - start)

        truth = stream.truth[t]
        unl = batch.unlabeled_idx
        if len(unl):
            acc = float(np.mean(predict(result.model, batch.features[unl]) == truth[unl]))
        else:
            acc = float("nan")
        step = float(np.linalg.norm(result.model.weights - model.weights, axis=0).sum())
        rec = RunRecord(variant, seed, t, acc, len(batch.labeled_idx), len(unl), result.iterations,
                        result.converged, result.objective, trajectory_increment=step,
                        ot_violation=None if plan is None else plan.violation, wall_ms=elapsed)
        if diagnostics:
            prior_w = prior_weights(model if use_prior else None, plan, batch.d, batch.class_count)
            for key, val in _bound_record(batch, prior_w, cfg, beta, lap, tail_bound, tail_delta).items():
                setattr(rec, key, val)
        log.debug("variant=%s seed=%d task=%d acc=%.4f iters=%d", variant, seed, t, acc, result.iterations)
        records.append(rec)
        fits.append(result)
        model = result.model
    return FlowResult(records, models + [f.model for f in fits], fits)
