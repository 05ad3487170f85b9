"""Distribution adaptable learning: reuse a linear classifier across an evolving
task stream by transporting it between feature sets with entropic optimal
transport, regularised by a graph Laplacian over each partially labeled batch."""

from .dataio import (
    Dataset,
    StreamSpec,
    TaskBatch,
    TaskStream,
    gen_toy_stream,
    load_csv,
    sample_mixture_stream,
    split_by_arrival,
)
from .diagnostics import BoundInputs, delta_beta_limit, rademacher_u2, trajectory_length
from .efmdi import CostMatrix, FeatureEncoding, cost_kde, cost_kme, encode
from .flow import RunRecord, run_task_flow
from .manifold import Laplacian, build_laplacian, manifold_penalty
from .solvers import FitResult, SolverConfig, fit_dal_cel, fit_dal_ls, predict
from .transport import LinearModel, TransportPlan, sinkhorn, transport_model

__version__ = "0.1.0"

__all__ = [
    "Dataset", "StreamSpec", "TaskBatch", "TaskStream", "gen_toy_stream", "load_csv",
    "sample_mixture_stream", "split_by_arrival", "BoundInputs", "delta_beta_limit",
    "rademacher_u2", "trajectory_length", "CostMatrix", "FeatureEncoding", "cost_kde",
    "cost_kme", "encode", "RunRecord", "run_task_flow", "Laplacian", "build_laplacian",
    "manifold_penalty", "FitResult", "SolverConfig", "fit_dal_cel", "fit_dal_ls", "predict",
    "LinearModel", "TransportPlan", "sinkhorn", "transport_model",
]
