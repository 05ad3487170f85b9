"""Mutual k-NN Gaussian similarity graph and the graph-smoothness penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

__all__ = ["Laplacian", "build_laplacian", "manifold_penalty", "SIGMA_FLOOR"]

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class Laplacian:
    matrix: np.ndarray
    k: int
    sigma: float
    adjacency: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def build_laplacian(features: np.ndarray, k: int = 10) -> Laplacian:
    """Graph Laplacian ``G = D - A`` over the rows of ``features``.

    ``A_ij = exp(-||x_i - x_j||^2 / sigma^2)`` when i and j are each among
    the other's k nearest neighbours, else 0. Neighbour ties go to the lower
    row index. ``sigma`` is the mean distance over the retained pairs.
    """
    x = np.asarray(features, dtype=float)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n (got k={k}, n={n})")
    dist = cdist(x, x)
    ranked = dist.copy()
    np.fill_diagonal(ranked, np.inf)
    nbrs = np.argsort(ranked, axis=1, kind="stable")[:, :k]
    knn = np.zeros((n, n), dtype=bool)
    knn[np.repeat(np.arange(n), k), nbrs.ravel()] = True
    mutual = knn & knn.T

    adj = np.zeros((n, n))
    if mutual.any():
        iu = np.triu(mutual, 1)
        sigma = float(dist[iu].mean())
        sigma = max(sigma, SIGMA_FLOOR)
        adj[mutual] = np.exp(-dist[mutual] ** 2 / sigma**2)
    else:
        sigma = SIGMA_FLOOR
    lap = np.diag(adj.sum(axis=1)) - adj
    return Laplacian(lap, k, sigma, adj)


def manifold_penalty(model, features: np.ndarray, lap: Laplacian) -> float:
    """``Tr(W^T X^T G X W)`` with samples as rows of ``X``.

    ``model`` may be a :class:`~dal.transport.LinearModel` or a bare weight matrix.
    """
    w = np.asarray(getattr(model, "weights", model), dtype=float)
    x = np.asarray(features, dtype=float)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"feature count {x.shape[1]} does not match model rows {w.shape[0]}")
    if x.shape[0] != lap.n:
        raise ValueError(f"{x.shape[0]} rows but Laplacian is {lap.n}x{lap.n}")
    f = x @ w
    return float(max(np.sum(f * (lap.matrix @ f)), 0.0))
