"""Dataset ingestion and evolving task-stream construction.

Three stream sources are supported: a CSV split in arrival order, a
source/target mixture whose target proportion follows a schedule, and a
synthetic rotating two-Gaussian toy problem. All of them emit the same
:class:`TaskStream` shape: batch 0 is double-sized and fully labeled, later
batches carry a small stratified labeled subset.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "TaskBatch",
    "TaskStream",
    "StreamSpec",
    "DataError",
    "load_csv",
    "split_by_arrival",
    "sample_mixture_stream",
    "gen_toy_stream",
    "build_stream",
    "stratified_labels",
    "task_sizes",
    "standardize_stream",
]


class DataError(ValueError):
    """Raised for malformed input data or an infeasible stream layout."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=int)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError("features must be a non-empty 2-D matrix")
        if y.shape != (x.shape[0],):
            raise DataError("labels must be a vector with one entry per row")
        if self.class_count < 2:
            raise DataError("need at least two classes")
        if y.min() < 0 or y.max() >= self.class_count:
            raise DataError("label ids must lie in [0, class_count)")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite values")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class TaskBatch:
    """One step of the stream as seen by a learner.

    Only the labeled subset carries labels. Ground truth for the remaining
    rows lives on :class:`TaskStream` and is never handed to solvers.
    """

    index: int
    features: np.ndarray
    labeled_idx: np.ndarray
    labels_onehot: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.labeled_idx, dtype=int)
        y = np.asarray(self.labels_onehot, dtype=float)
        n = self.features.shape[0]
        if len(np.unique(idx)) != len(idx):
            raise DataError("labeled_idx entries must be unique")
        if len(idx) and (idx.min() < 0 or idx.max() >= n):
            raise DataError("labeled_idx out of range")
        if y.ndim != 2 or y.shape[0] != len(idx):
            raise DataError("labels_onehot must have one row per labeled index")
        if len(idx) and not np.all(y.sum(axis=1) == 1.0):
            raise DataError("each one-hot row must contain exactly one 1")
        object.__setattr__(self, "labeled_idx", idx)
        object.__setattr__(self, "labels_onehot", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def class_count(self) -> int:
        return self.labels_onehot.shape[1]

    @property
    def labeled_features(self) -> np.ndarray:
        return self.features[self.labeled_idx]

    @property
    def unlabeled_idx(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.labeled_idx] = False
        return np.flatnonzero(mask)

    def with_features(self, features: np.ndarray) -> "TaskBatch":
        return TaskBatch(self.index, features, self.labeled_idx, self.labels_onehot)


@dataclass(frozen=True)
class TaskStream:
    """Ordered batches plus the held-out labels used only for evaluation."""

    batches: tuple
    truth: tuple

    def __len__(self) -> int:
        return len(self.batches)

    def __getitem__(self, i):
        return self.batches[i]

    def __iter__(self) -> Iterator[TaskBatch]:
        return iter(self.batches)

    @property
    def class_count(self) -> int:
        return self.batches[0].class_count


@dataclass
class StreamSpec:
    mode: str = "toy"
    task_count: int = 4
    labeled_fraction: float = 0.01
    task0_size_multiplier: float = 2.0
    seed: int = 0
    batch_size: int = 200
    schedule: list | None = None
    rotation_deg: float = 30.0
    separation: float = 4.0
    data: dict | None = None
    source: dict | None = None
    target: dict | None = None

    def validate(self) -> None:
        if self.mode not in ("csv_split", "mixture", "toy"):
            raise DataError(f"unknown stream mode {self.mode!r}")
        if self.task_count < 2:
            raise DataError("task_count must be >= 2")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise DataError("labeled_fraction must lie in (0, 1]")
        if self.task0_size_multiplier <= 0:
            raise DataError("task0_size_multiplier must be positive")
        if self.batch_size < 2:
            raise DataError("batch_size must be >= 2")
        if self.mode == "mixture":
            lam = self.mixture_schedule()
            if len(lam) != self.task_count + 1:
                raise DataError("schedule needs one value per batch (task_count + 1)")
            if lam[0] != 0.0 or lam[-1] != 1.0 or np.any(np.diff(lam) < 0):
                raise DataError("schedule must be nondecreasing from 0 to 1")
            if np.any((lam < 0) | (lam > 1)):
                raise DataError("schedule values must lie in [0, 1]")

    def mixture_schedule(self) -> np.ndarray:
        if self.schedule is None:
            return np.linspace(0.0, 1.0, self.task_count + 1)
        return np.asarray(self.schedule, dtype=float)


def load_csv(path, label_column=-1, has_header: bool = True) -> Dataset:
    """Read a labeled feature table.

    ``label_column`` is a header name or a zero-based index (negative
    indices count from the end). Labels are re-indexed to dense ids in
    order of first appearance.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header = None
    if has_header:
        if not rows:
            raise DataError("empty dataset")
        header, rows = rows[0], rows[1:]
    if not rows:
        raise DataError("empty dataset")

    width = len(header) if header is not None else len(rows[0])
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if header is None or label_column not in header:
            raise DataError(f"label column {label_column!r} not found")
        lab = header.index(label_column)
    else:
        lab = int(label_column)
        if lab < 0:
            lab += width
        if not 0 <= lab < width:
            raise DataError(f"label column index {label_column} out of range")

    ids: dict[str, int] = {}
    labels, feats = [], []
    for r, row in enumerate(rows):
        line = r + (2 if has_header else 1)
        if len(row) != width:
            raise DataError(f"row {line}: expected {width} columns, got {len(row)}")
        vals = []
        for c, cell in enumerate(row):
            if c == lab:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"row {line}, column {c}: cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"row {line}, column {c}: non-finite value {cell!r}")
            vals.append(v)
        key = row[lab].strip()
        labels.append(ids.setdefault(key, len(ids)))
        feats.append(vals)
    if len(ids) < 2:
        raise DataError("single-class dataset")
    return Dataset(np.array(feats, dtype=float).reshape(len(rows), width - 1),
                   np.array(labels, dtype=int), len(ids))


def task_sizes(n: int, task_count: int, multiplier: float = 2.0) -> list[int]:
    """Row counts for batches 0..task_count with batch 0 ``multiplier`` times larger."""
    first = math.ceil(multiplier * n / (task_count + multiplier))
    base, extra = divmod(n - first, task_count)
    return [first] + [base + (1 if i < extra else 0) for i in range(task_count)]


def stratified_labels(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Pick ``max(1, floor(fraction * n_c))`` rows of every class present, sorted."""
    picked = []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        k = len(rows) if fraction >= 1.0 else max(1, int(math.floor(fraction * len(rows))))
        picked.append(rng.choice(rows, size=k, replace=False))
    return np.sort(np.concatenate(picked))


def _onehot(labels: np.ndarray, class_count: int) -> np.ndarray:
    out = np.zeros((len(labels), class_count))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _make_stream(chunks, class_count, fraction, rng) -> TaskStream:
    batches, truth = [], []
    for t, (x, y) in enumerate(chunks):
        if t == 0:
            idx = np.arange(len(y))
        else:
            idx = stratified_labels(y, fraction, rng)
        batches.append(TaskBatch(t, x, idx, _onehot(y[idx], class_count)))
        truth.append(np.asarray(y, dtype=int))
    return TaskStream(tuple(batches), tuple(truth))


def split_by_arrival(ds: Dataset, spec: StreamSpec) -> TaskStream:
    """Cut ``ds`` in row order into ``task_count + 1`` consecutive batches."""
    spec.validate()
    sizes = task_sizes(ds.n, spec.task_count, spec.task0_size_multiplier)
    if min(sizes) < ds.class_count:
        raise DataError(
            f"too few samples: {ds.n} rows give a smallest batch of {min(sizes)}, "
            f"need at least {ds.class_count}")
    bounds = np.cumsum([0] + sizes)
    chunks = [(ds.features[a:b], ds.labels[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    rng = np.random.default_rng(spec.seed)
    return _make_stream(chunks, ds.class_count, spec.labeled_fraction, rng)


def sample_mixture_stream(source: Dataset, target: Dataset, spec: StreamSpec) -> TaskStream:
    """Draw batch t row by row from target with probability schedule[t], else source.

    Rows are drawn without replacement from each pool across the whole stream.
    """
    spec.validate()
    if source.d != target.d:
        raise DataError(f"dimension mismatch: source d={source.d}, target d={target.d}")
    c = max(source.class_count, target.class_count)
    rng = np.random.default_rng(spec.seed)
    lam = spec.mixture_schedule()
    sizes = [int(round(spec.task0_size_multiplier * spec.batch_size))] + [spec.batch_size] * spec.task_count

    pools = [rng.permutation(source.n), rng.permutation(target.n)]
    cursor = [0, 0]
    chunks = []
    for t, size in enumerate(sizes):
        from_target = rng.random(size) < lam[t]
        rows_x = np.empty((size, source.d))
        rows_y = np.empty(size, dtype=int)
        for which, ds in ((0, source), (1, target)):
            sel = np.flatnonzero(from_target == bool(which))
            take = pools[which][cursor[which]:cursor[which] + len(sel)]
            if len(take) < len(sel):
                name = "target" if which else "source"
                raise DataError(f"{name} pool exhausted at batch {t}")
            cursor[which] += len(sel)
            rows_x[sel] = ds.features[take]
            rows_y[sel] = ds.labels[take]
        chunks.append((rows_x, rows_y))
    return _make_stream(chunks, c, spec.labeled_fraction, rng)


def gen_toy_stream(spec: StreamSpec) -> TaskStream:
    """Two unit-covariance Gaussian classes whose means rotate each task.

    Class means sit at +/- separation/2 along a direction that turns by
    ``rotation_deg`` per batch, starting on the first axis.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sizes = [int(round(spec.task0_size_multiplier * spec.batch_size))] + [spec.batch_size] * spec.task_count
    chunks = []
    for t, size in enumerate(sizes):
        theta = math.radians(spec.rotation_deg * t)
        mu = 0.5 * spec.separation * np.array([math.cos(theta), math.sin(theta)])
        y = rng.permutation(np.arange(size) % 2)
        sign = np.where(y == 0, 1.0, -1.0)[:, None]
        x = sign * mu + rng.standard_normal((size, 2))
        chunks.append((x, y))
    return _make_stream(chunks, 2, spec.labeled_fraction, rng)


def build_stream(spec: StreamSpec) -> TaskStream:
    """Dispatch on ``spec.mode``; CSV-backed modes read the paths in ``spec``."""
    if spec.mode == "toy":
        return gen_toy_stream(spec)
    if spec.mode == "csv_split":
        if not spec.data:
            raise DataError("csv_split mode needs a 'data' block")
        return split_by_arrival(_load_block(spec.data), spec)
    if spec.mode == "mixture":
        if not spec.source or not spec.target:
            raise DataError("mixture mode needs 'source' and 'target' blocks")
        return sample_mixture_stream(_load_block(spec.source), _load_block(spec.target), spec)
    raise DataError(f"unknown stream mode {spec.mode!r}")


def _load_block(block: dict) -> Dataset:
    return load_csv(block["path"], block.get("label_column", -1), block.get("has_header", True))


def standardize_stream(stream: TaskStream, scale: bool = True) -> TaskStream:
    """Shift every batch by the batch-0 column means, and with ``scale`` divide
    by the batch-0 stds (zero-std columns left unscaled)."""
    x0 = stream[0].features
    mean = x0.mean(axis=0)
    std = x0.std(axis=0) if scale else np.ones(x0.shape[1])
    std[std == 0] = 1.0
    batches = tuple(b.with_features((b.features - mean) / std) for b in stream)
    return TaskStream(batches, stream.truth)


def concat_rows(stream: Sequence[TaskBatch]) -> np.ndarray:
    return np.vstack([b.features for b in stream])
