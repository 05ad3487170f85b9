import csv
import json
import re

import numpy as np
import pytest

from dal.cli import ConfigError, config_from_dict, diag_command, main, parse_config, run_experiment, summarize

TOY = {"stream": {"mode": "toy", "task_count": 4, "batch_size": 60}}


def _config(tmp_path, raw, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


def _small(**extra):
    raw = json.loads(json.dumps(TOY))
    raw.update({"variants": ["dal", "ridge"], "seeds": [0, 1]})
    raw.update(extra)
    return raw


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run_experiment(config_from_dict(_small()), out) == 0
    return out


def _records(out):
    return [json.loads(line) for f in sorted((out / "runs").glob("*.jsonl"))
            for line in f.read_text().splitlines()]


def test_defaults():
    cfg = config_from_dict({"stream": {}})
    assert cfg.solver.alpha == 1.0 and cfg.solver.beta == 0.1
    assert cfg.stream.labeled_fraction == 0.01 and cfg.stream.task0_size_multiplier == 2.0
    assert cfg.variants == ["dal"]


def test_negative_alpha_pointer():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"stream": {}, "solver": {"alpha": -1}})
    assert info.value.pointer == "/solver/alpha"


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="alpha_"):
        config_from_dict({"stream": {}, "solver": {"alpha_": 1}})


def test_missing_stream_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="stream"):
        config_from_dict({})
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(p)


def test_record_count(run_dir):
    recs = _records(run_dir)
    assert len(recs) == 2 * 2 * 4
    assert {r["task"] for r in recs} == {1, 2, 3, 4}


def test_artifacts(run_dir):
    for name in ("config.json", "traces.csv", "summary.csv", "summary_table.csv"):
        assert (run_dir / name).is_file()
    assert len(list((run_dir / "models").glob("*.npz"))) == 4
    assert not (run_dir / "error.json").exists()


def test_summary_table_format(run_dir):
    with open(run_dir / "summary_table.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["variant", "task1", "task2", "task3", "task4"]
    for row in rows[1:]:
        assert all(re.fullmatch(r"\d\.\d{3}\(\d\.\d{3}\)", c) for c in row[1:])


def test_summary_recomputed_from_jsonl(run_dir):
    recs = _records(run_dir)
    with open(run_dir / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        accs = [r["accuracy"] for r in recs if r["variant"] == row["variant"] and r["task"] == int(row["task"])]
        assert float(row["mean"]) == pytest.approx(np.mean(accs), abs=1e-12)
        assert float(row["std"]) == pytest.approx(np.std(accs, ddof=1), abs=1e-12)


def test_summarize_single_seed_std_zero():
    out = summarize([{"variant": "dal", "task": 1, "accuracy": 0.5}])
    assert out[0]["std"] == 0.0


def test_rerun_identical_modulo_timing(run_dir, tmp_path):
    assert run_experiment(config_from_dict(_small()), tmp_path) == 0
    for f in sorted((run_dir / "runs").glob("*.jsonl")):
        a = [json.loads(x) for x in f.read_text().splitlines()]
        b = [json.loads(x) for x in (tmp_path / "runs" / f.name).read_text().splitlines()]
        for ra, rb in zip(a, b):
            ra.pop("wall_ms")
            rb.pop("wall_ms")
        assert a == b
    for name in ("summary.csv", "summary_table.csv", "traces.csv"):
        assert (run_dir / name).read_bytes() == (tmp_path / name).read_bytes()


def test_diag_trajectory(run_dir, capsys):
    lines = diag_command(run_dir, "trajectory")
    assert len(lines) == 1 + 4
    for line in lines[1:]:
        variant, seed, length, _ = line.split("\t")
        assert variant in ("dal", "ridge") and float(length) >= 0


def test_diag_u2_beta_zero(tmp_path):
    assert run_experiment(config_from_dict({**TOY, "solver": {"beta": 0.0}}), tmp_path) == 0
    lines = diag_command(tmp_path, "u2")
    for line in lines[1:]:
        cols = line.split("\t")
        assert float(cols[5]) == pytest.approx(float(cols[6]), rel=1e-10)


def test_diag_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="no run artifacts"):
        diag_command(tmp_path, "trajectory")
    assert main(["diag", str(tmp_path), "--what", "u2"]) == 2


def test_main_exit_codes(tmp_path):
    bad = _config(tmp_path, {"stream": {}, "solver": {"alpha": -1}}, "bad.json")
    assert main(["run", str(bad), "--out", str(tmp_path / "x")]) == 1
    missing = _config(tmp_path, {"stream": {"mode": "csv_split", "data": {"path": str(tmp_path / "none.csv")}}},
                      "missing.json")
    out = tmp_path / "y"
    assert main(["run", str(missing), "--out", str(out)]) == 2
    err = json.loads((out / "error.json").read_text())
    assert err["error"] == "FileNotFoundError"


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DAL_SEED", "7")
    p = _config(tmp_path, TOY)
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 0
    assert [f.name for f in (tmp_path / "o" / "runs").iterdir()] == ["dal-seed7.jsonl"]


def test_gen_writes_tasks(tmp_path):
    p = _config(tmp_path, TOY)
    assert main(["gen", str(p), "--out", str(tmp_path)]) == 0
    files = sorted((tmp_path / "stream").glob("task_*.csv"))
    assert len(files) == 5
    with open(files[1]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 60
    assert sum(int(r["labeled"]) for r in rows) == 2
