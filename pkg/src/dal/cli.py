"""Command-line experiment runner.

::

    dal run <config.json> [--out DIR]
    dal gen <config.json> [--out DIR]
    dal diag <run-dir> --what u2|trajectory

Exit codes: 0 success, 1 configuration error, 2 runtime failure. ``DAL_SEED``
(one integer or a comma-separated list) overrides the configured seeds.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .dataio import StreamSpec, build_stream
from .diagnostics import trajectory_length
from .flow import VARIANTS, run_task_flow
from .solvers import SolverConfig

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "CONFIG_SCHEMA",
    "parse_config",
    "config_from_dict",
    "run_experiment",
    "generate_stream",
    "diag_command",
    "summarize",
    "main",
]

log = logging.getLogger("dal")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
TIMING_FIELDS = ("wall_ms",)

_num = {"type": "number"}
_dataset = {
    "type": "object",
    "additionalProperties": False,
    "required": ["path"],
    "properties": {
        "path": {"type": "string"},
        "label_column": {"type": ["string", "integer"]},
        "has_header": {"type": "boolean"},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["stream"],
    "properties": {
        "stream": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["csv_split", "mixture", "toy"]},
                "task_count": {"type": "integer", "minimum": 2},
                "labeled_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "task0_size_multiplier": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
                "batch_size": {"type": "integer", "minimum": 2},
                "schedule": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "rotation_deg": _num,
                "separation": {"type": "number", "exclusiveMinimum": 0},
                "data": _dataset,
                "source": _dataset,
                "target": _dataset,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "loss": {"enum": ["ls", "cel"]},
                "alpha": {"type": "number", "minimum": 0},
                "beta": {"type": "number", "minimum": 0},
                "step0": {"type": "number", "exclusiveMinimum": 0},
                "shrink": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_iter": {"type": "integer", "minimum": 1},
                "obj_tol": {"type": "number", "exclusiveMinimum": 0},
                "knn_k": {"type": "integer", "minimum": 1},
                "efmdi": {"enum": ["kme", "kde"]},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "augment_bias": {"type": "boolean"},
            },
        },
        "variants": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"enum": list(VARIANTS)}},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer"}},
        "output_dir": {"type": "string"},
        "preprocess": {"enum": ["center", "zscore", "none"]},
        "diagnostics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "tail_bound": {"type": "number", "exclusiveMinimum": 0},
                "tail_delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
    },
}


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"
        self.message = message


@dataclass
class ExperimentConfig:
    stream: StreamSpec
    solver: SolverConfig = field(default_factory=SolverConfig)
    variants: list = field(default_factory=lambda: ["dal"])
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    preprocess: str = "center"
    diagnostics: dict = field(default_factory=lambda: {"enabled": True, "tail_bound": 10.0, "tail_delta": 0.05})

    def to_dict(self) -> dict:
        return asdict(self)


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate ``raw`` against :data:`CONFIG_SCHEMA` and fill defaults."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        raise ConfigError(_pointer(err.absolute_path), err.message)
    stream = StreamSpec(**raw["stream"])
    solver = SolverConfig(**raw.get("solver", {}))
    diag = {"enabled": True, "tail_bound": 10.0, "tail_delta": 0.05}
    diag.update(raw.get("diagnostics", {}))
    cfg = ExperimentConfig(
        stream=stream,
        solver=solver,
        variants=list(raw.get("variants", ["dal"])),
        seeds=list(raw.get("seeds", [0])),
        output_dir=raw.get("output_dir", "runs"),
        preprocess=raw.get("preprocess", "center"),
        diagnostics=diag,
    )
    try:
        stream.validate()
    except ValueError as exc:
        raise ConfigError("/stream", str(exc)) from None
    try:
        solver.validate()
    except ValueError as exc:
        raise ConfigError("/solver", str(exc)) from None
    return cfg


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("/", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("/", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("/", "config must be a JSON object")
    return config_from_dict(raw)


def _seed_override(cfg: ExperimentConfig) -> None:
    env = os.environ.get("DAL_SEED")
    if env is None or not env.strip():
        return
    try:
        cfg.seeds = [int(s) for s in env.replace(";", ",").split(",") if s.strip()]
    except ValueError:
        raise ConfigError("/seeds", f"DAL_SEED must be integers, got {env!r}") from None
    if not cfg.seeds:
        raise ConfigError("/seeds", "DAL_SEED is empty")


# --- output helpers ---------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def _run_name(variant: str, seed: int) -> str:
    return f"{variant}-seed{seed}"


def summarize(records) -> list[dict]:
    """Mean and std (ddof=1, 0 for a single seed) of accuracy per (variant, task)."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r["variant"], r["task"]), []).append(r["accuracy"])
    out = []
    for (variant, task), accs in groups.items():
        a = np.asarray(accs, dtype=float)
        std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        out.append({"variant": variant, "task": task, "mean": float(a.mean()), "std": std, "n": len(a)})
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> int:
    """Run every (variant, seed) pair and write the artifacts under ``out_dir``.

    Layout::

        config.json                 resolved configuration
        runs/<variant>-seed<k>.jsonl one RunRecord per evaluated task
        models/<variant>-seed<k>.npz weights per task (task 0 = source)
        traces.csv                  objective value per fit iteration
        summary.csv                 mean/std accuracy per (variant, task)
        summary_table.csv           variant x task "mean(std)" cells
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        _atomic_write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        all_records, trace_rows = [], []
        for seed in cfg.seeds:
            spec = StreamSpec(**{**asdict(cfg.stream), "seed": seed})
            stream = build_stream(spec)
            for variant in cfg.variants:
                log.info("running %s seed=%d", variant, seed)
                res = run_task_flow(stream, cfg.solver, variant, seed, preprocess=cfg.preprocess,
                                    diagnostics=cfg.diagnostics.get("enabled", True),
                                    tail_bound=cfg.diagnostics.get("tail_bound", 10.0),
                                    tail_delta=cfg.diagnostics.get("tail_delta", 0.05))
                lines = []
                for rec in res.records:
                    d = {k: _jsonable(v) for k, v in rec.to_dict().items()}
                    lines.append(json.dumps(d, sort_keys=True))
                    all_records.append(d)
                name = _run_name(variant, seed)
                _atomic_write(out / "runs" / f"{name}.jsonl", "\n".join(lines) + "\n")
                buf = io.BytesIO()
                np.savez(buf, weights=np.stack([m.weights for m in res.models]),
                         bias=np.stack([m.bias for m in res.models]))
                (out / "models").mkdir(exist_ok=True)
                tmp = out / "models" / f".{name}.npz.tmp"
                tmp.write_bytes(buf.getvalue())
                os.replace(tmp, out / "models" / f"{name}.npz")
                for rec, fit in zip(res.records, res.fits):
                    for i, val in enumerate(fit.objective_trace):
                        trace_rows.append([variant, seed, rec.task, i, repr(float(val))])

        _atomic_write(out / "traces.csv", _csv_text(["variant", "seed", "task", "iteration", "objective"],
                                                    trace_rows))
        summary = summarize(all_records)
        _atomic_write(out / "summary.csv", _csv_text(
            ["variant", "task", "mean", "std", "n"],
            [[s["variant"], s["task"], repr(s["mean"]), repr(s["std"]), s["n"]] for s in summary]))
        tasks = sorted({s["task"] for s in summary})
        cell = {(s["variant"], s["task"]): s for s in summary}
        table = []
        for v in cfg.variants:
            row = [v]
            for t in tasks:
                s = cell[(v, t)]
                row.append(f"{s['mean']:.3f}({s['std']:.3f})")
            table.append(row)
        _atomic_write(out / "summary_table.csv", _csv_text(["variant"] + [f"task{t}" for t in tasks], table))
        err = out / "error.json"
        if err.exists():
            err.unlink()
    except Exception as exc:
        report = {"error": type(exc).__name__, "message": str(exc), "task": getattr(exc, "task", None),
                  "traceback": traceback.format_exc()}
        _atomic_write(out / "error.json", json.dumps(report, indent=2) + "\n")
        log.error("run failed: %s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def generate_stream(cfg: ExperimentConfig, out_dir=None) -> int:
    """Write each batch of the configured stream (first seed) as ``task_<t>.csv``.

    Columns: the features, ``label`` (ground truth) and ``labeled`` (0/1).
    """
    out = Path(out_dir or cfg.output_dir) / "stream"
    spec = StreamSpec(**{**asdict(cfg.stream), "seed": cfg.seeds[0]})
    stream = build_stream(spec)
    for batch, truth in zip(stream.batches, stream.truth):
        mask = np.zeros(batch.n, dtype=int)
        mask[batch.labeled_idx] = 1
        header = [f"x{j}" for j in range(batch.d)] + ["label", "labeled"]
        rows = [[repr(float(v)) for v in x] + [int(y), int(m)]
                for x, y, m in zip(batch.features, truth, mask)]
        _atomic_write(out / f"task_{batch.index}.csv", _csv_text(header, rows))
    return EXIT_OK


def _load_records(run_dir: Path) -> list[dict]:
    files = sorted((run_dir / "runs").glob("*.jsonl")) if (run_dir / "runs").is_dir() else []
    if not files:
        raise FileNotFoundError(f"no run artifacts in {run_dir}")
    recs = []
    for f in files:
        recs.extend(json.loads(line) for line in f.read_text().splitlines() if line.strip())
    return recs


def diag_command(run_dir, what: str = "trajectory", stream=None) -> list[str]:
    """Report diagnostics for a finished run directory; returns the printed lines."""
    stream = stream or sys.stdout
    run_dir = Path(run_dir)
    lines = []
    if what == "trajectory":
        files = sorted((run_dir / "models").glob("*.npz")) if (run_dir / "models").is_dir() else []
        if not files:
            raise FileNotFoundError(f"no run artifacts in {run_dir}")
        lines.append("variant\tseed\tlength\tper_class")
        for f in files:
            variant, seed = f.stem.rsplit("-seed", 1)
            with np.load(f) as z:
                ws = list(z["weights"])
            per, total = trajectory_length(ws, np.linspace(0.0, 1.0, len(ws)))
            lines.append(f"{variant}\t{seed}\t{total:.12g}\t" + ",".join(f"{p:.6g}" for p in per))
    elif what == "u2":
        recs = _load_records(run_dir)
        lines.append("variant\tseed\ttask\talpha_t\tbeta_t\tu2\ttr_kll_over_alpha_t\tlower\tupper")
        for r in sorted(recs, key=lambda r: (r["variant"], r["seed"], r["task"])):
            if r.get("u2") is None:
                lines.append(f"{r['variant']}\t{r['seed']}\t{r['task']}\tn/a")
                continue
            base = r["trace_kll"] / r["alpha_t"]
            lines.append(f"{r['variant']}\t{r['seed']}\t{r['task']}\t{r['alpha_t']:.6g}\t{r['beta_t']:.6g}\t"
                         f"{r['u2']:.12g}\t{base:.12g}\t{r['rademacher_lower']:.6g}\t{r['rademacher_upper']:.6g}")
    else:
        raise ValueError(f"unknown diagnostic {what!r}")
    for line in lines:
        print(line, file=stream)
    return lines


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dal", description="Distribution adaptable learning over task streams")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None)
    p_gen = sub.add_parser("gen", help="write the configured stream as CSV files")
    p_gen.add_argument("config")
    p_gen.add_argument("--out", default=None)
    p_diag = sub.add_parser("diag", help="report diagnostics of a finished run")
    p_diag.add_argument("run_dir")
    p_diag.add_argument("--what", choices=["u2", "trajectory"], default="trajectory")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "diag":
        try:
            diag_command(args.run_dir, args.what)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK

    try:
        cfg = parse_config(args.config)
        _seed_override(cfg)
    except ConfigError as exc:
        print(f"config error at {exc.pointer}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        return run_experiment(cfg, args.out)
    try:
        return generate_stream(cfg, args.out)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
