"""Per-feature marginal encodings and the feature-to-feature evolving cost.

Each feature column of a batch is treated as a 1-D sample. Two encodings
are available:

* ``kme``: Gaussian kernel mean embedding. The cost between features is the
  squared RKHS distance of their empirical embeddings (squared MMD).
* ``kde``: Gaussian kernel density estimate. The cost is the squared L2
  distance between the two densities, computed in closed form.

Cost matrices are oriented with rows indexing the current batch's features
and columns the previous batch's features.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FeatureEncoding",
    "CostMatrix",
    "encode",
    "cost_kme",
    "cost_kde",
    "evolving_cost",
    "median_width",
    "kde_bandwidth",
    "kme_sq_distance",
    "kme_trace_form",
    "kde_sq_distance",
]

BANDWIDTH_FLOOR = 1e-6
_MEDIAN_MAX_ROWS = 1000


@dataclass(frozen=True)
class FeatureEncoding:
    method: str
    samples: np.ndarray  # (n, d): column mu is feature mu's sample list
    bandwidth: np.ndarray  # (d,) for kde, scalar broadcast for kme
    batch_index: int = 0
    warning: bool = False

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @property
    def n(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray
    row_tag: int
    col_tag: int


def median_width(*samples: np.ndarray) -> float:
    """Median of within-feature pairwise distances, pooled over features and batches."""
    dists = []
    for x in samples:
        x = np.asarray(x, dtype=float)
        if x.shape[0] > _MEDIAN_MAX_ROWS:
            x = x[np.linspace(0, x.shape[0] - 1, _MEDIAN_MAX_ROWS).astype(int)]
        iu = np.triu_indices(x.shape[0], k=1)
        for col in x.T:
            dists.append(np.abs(col[:, None] - col[None, :])[iu])
    pooled = np.concatenate(dists) if dists else np.zeros(0)
    med = float(np.median(pooled)) if pooled.size else 0.0
    if med <= 0.0:
        nz = pooled[pooled > 0]
        med = float(np.median(nz)) if nz.size else 1.0
    return med


def kde_bandwidth(col: np.ndarray) -> float:
    """h = 1.05 * std * N^(-1/5), std with ddof=1 (0 for a single sample)."""
    n = len(col)
    std = float(np.std(col, ddof=1)) if n > 1 else 0.0
    return 1.05 * std * n ** (-0.2)


def encode(batch, method: str = "kme", bandwidth=None) -> FeatureEncoding:
    """Encode every feature column of ``batch``.

    ``batch`` is a :class:`~dal.dataio.TaskBatch` or a plain (n, d) array.
    ``bandwidth`` overrides the automatic rule: the median heuristic for
    ``kme`` and the 1.05 std N^(-1/5) rule for ``kde``.
    """
    x = np.asarray(getattr(batch, "features", batch), dtype=float)
    t = int(getattr(batch, "index", 0))
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("cannot encode an empty batch")
    warn = False
    if method == "kme":
        width = median_width(x) if bandwidth is None else float(bandwidth)
        if width <= 0:
            raise ValueError("kernel width must be positive")
        bw = np.full(x.shape[1], width)
    elif method == "kde":
        if bandwidth is None:
            bw = np.array([kde_bandwidth(c) for c in x.T])
        else:
            bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (x.shape[1],)).copy()
        if np.any(bw < BANDWIDTH_FLOOR):
            warn = True
            warnings.warn("zero-variance feature: KDE bandwidth floored at 1e-6", RuntimeWarning,
                          stacklevel=2)
            bw = np.maximum(bw, BANDWIDTH_FLOOR)
    else:
        raise ValueError(f"unknown encoding method {method!r}")
    return FeatureEncoding(method, x, bw, t, warn)


def _gauss(diff: np.ndarray, width: float) -> np.ndarray:
    return np.exp(-0.5 * (diff / width) ** 2)


def kme_sq_distance(x: np.ndarray, y: np.ndarray, width: float) -> float:
    """Squared RKHS distance between the Gaussian mean embeddings of two 1-D samples."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    kxx = _gauss(x[:, None] - x[None, :], width).mean()
    kyy = _gauss(y[:, None] - y[None, :], width).mean()
    kxy = _gauss(x[:, None] - y[None, :], width).mean()
    return float(kxx + kyy - 2.0 * kxy)


def kme_trace_form(x: np.ndarray, y: np.ndarray, width: float) -> float:
    """Same quantity as :func:`kme_sq_distance` via Trace(K H) on the stacked sample.

    K is the Gram matrix of ``[x; y]``; H weights the x-block by 1/n^2, the
    y-block by 1/m^2 and the cross blocks by -1/(nm).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = len(x), len(y)
    z = np.concatenate([x, y])
    k = _gauss(z[:, None] - z[None, :], width)
    h = np.full((n + m, n + m), -1.0 / (n * m))
    h[:n, :n] = 1.0 / n**2
    h[n:, n:] = 1.0 / m**2
    return float(np.trace(k @ h))


def kde_sq_distance(x: np.ndarray, y: np.ndarray, hx: float, hy: float) -> float:
    """Closed-form integral of (p_x - p_y)^2 for two Gaussian KDEs.

    The product of two normal densities integrates to a normal density of
    the difference of their centres with summed variances.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    def cross(a, b, var):
        diff = a[:, None] - b[None, :]
        return np.mean(np.exp(-0.5 * diff**2 / var)) / np.sqrt(2.0 * np.pi * var)

    return float(cross(x, x, 2 * hx**2) + cross(y, y, 2 * hy**2) - 2 * cross(x, y, hx**2 + hy**2))


def _check_pair(current: FeatureEncoding, previous: FeatureEncoding, method: str):
    if current.method != method or previous.method != method:
        raise ValueError(f"both encodings must use {method!r}")
    if current.d != previous.d:
        raise ValueError(f"dimension mismatch: {current.d} vs {previous.d} features")


def _finish(values: np.ndarray, current, previous) -> CostMatrix:
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite cost entry")
    if current is previous or current.samples is previous.samples:
        values = 0.5 * (values + values.T)
        np.fill_diagonal(values, 0.0)
    return CostMatrix(np.maximum(values, 0.0), current.batch_index, previous.batch_index)


def cost_kme(current: FeatureEncoding, previous: FeatureEncoding) -> CostMatrix:
    """Squared MMD between every (current feature, previous feature) pair.

    The current encoding's kernel width is used for both sides.
    """
    _check_pair(current, previous, "kme")
    width = float(current.bandwidth[0])
    x, y = current.samples, previous.samples
    n, m = x.shape[0], y.shape[0]
    self_x = np.array([_gauss(c[:, None] - c[None, :], width).sum() for c in x.T]) / n**2
    self_y = np.array([_gauss(c[:, None] - c[None, :], width).sum() for c in y.T]) / m**2
    cross = np.empty((current.d, previous.d))
    for mu in range(current.d):
        diff = x[:, mu][:, None, None] - y[None, :, :]  # (n, m, d)
        cross[mu] = _gauss(diff, width).sum(axis=(0, 1)) / (n * m)
    return _finish(self_x[:, None] + self_y[None, :] - 2.0 * cross, current, previous)


def cost_kde(current: FeatureEncoding, previous: FeatureEncoding) -> CostMatrix:
    """Integrated squared difference between every pair of feature KDEs."""
    _check_pair(current, previous, "kde")
    x, y = current.samples, previous.samples
    hx, hy = current.bandwidth, previous.bandwidth

    def self_term(s, h):
        out = np.empty(s.shape[1])
        for j, c in enumerate(s.T):
            var = 2 * h[j] ** 2
            out[j] = np.mean(np.exp(-0.5 * (c[:, None] - c[None, :]) ** 2 / var)) / np.sqrt(2 * np.pi * var)
        return out

    sx, sy = self_term(x, hx), self_term(y, hy)
    cross = np.empty((current.d, previous.d))
    for mu in range(current.d):
        var = hx[mu] ** 2 + hy**2  # (d,)
        diff = x[:, mu][:, None, None] - y[None, :, :]
        dens = np.exp(-0.5 * diff**2 / var) / np.sqrt(2 * np.pi * var)
        cross[mu] = dens.mean(axis=(0, 1))
    return _finish(sx[:, None] + sy[None, :] - 2.0 * cross, current, previous)


def evolving_cost(current_batch, previous_batch, method: str = "kme") -> CostMatrix:
    """Encode two consecutive batches and return their cost matrix.

    For ``kme`` the kernel width is the median heuristic over both batches
    pooled, shared by the two encodings.
    """
    xc = np.asarray(getattr(current_batch, "features", current_batch), dtype=float)
    xp = np.asarray(getattr(previous_batch, "features", previous_batch), dtype=float)
    if method == "kme":
        width = median_width(xc, xp)
        cur = encode(current_batch, "kme", width)
        prev = encode(previous_batch, "kme", width)
        return cost_kme(cur, prev)
    if method == "kde":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return cost_kde(encode(current_batch, "kde"), encode(previous_batch, "kde"))
    raise ValueError(f"unknown encoding method {method!r}")
