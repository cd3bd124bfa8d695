import csv
import json

import pytest

from tscomm import cli, roadnet


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "grid.json"
    assert cli.main(["gen", "--rows", "1", "--cols", "2", "--time-span", "300", "--seed", "3", "--out", str(path)]) == 0
    return path


def test_gen_writes_loadable_scenario(scenario_file):
    sc = roadnet.load_scenario(scenario_file)
    assert len(sc.net.real_intersections) == 2
    assert json.loads(scenario_file.read_text())["meta"]["time_span_s"] == 300


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_eval_baselines(scenario_file, tmp_path):
    for name in ("fixed", "sotl", "maxpressure"):
        out = tmp_path / f"{name}.csv"
        assert cli.main(["eval", "--scenario", str(scenario_file), "--controller", name,
                         "--episodes", "2", "--out", str(out)]) == 0
        rows = _rows(out)
        assert len(rows) == 2 and rows[0]["controller"] == name and rows[0]["comm"] == "none"


def test_train_eval_trace_checkpoint(scenario_file, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"format": 1, "train": {"buffer_size": 60, "batch_size": 10, "log_every": 20}}))
    ckpt = tmp_path / "m.ckpt"
    log = tmp_path / "log.csv"
    assert cli.main(["train", "--scenario", str(scenario_file), "--config", str(cfg), "--frames", "80",
                     "--comm", "unicomm", "--phase-target", "current", "--seed", "1",
                     "--out", str(ckpt), "--log", str(log)]) == 0
    assert ckpt.exists() and _rows(log)[-1]["frame"] == "80"
    out = tmp_path / "u.csv"
    assert cli.main(["eval", "--scenario", str(scenario_file), "--controller", "unilight",
                     "--checkpoint", str(ckpt), "--episodes", "1", "--out", str(out)]) == 0
    assert _rows(out)[0]["comm"] == "unicomm"
    trace = tmp_path / "t.csv"
    assert cli.main(["trace", "--scenario", str(scenario_file), "--controller", "unilight",
                     "--checkpoint", str(ckpt), "--horizon", "60", "--out", str(trace)]) == 0
    lines = trace.read_text().splitlines()
    assert lines[0] == "tick,vehicle,event,lane" and len(lines) > 1


def test_unilight_needs_checkpoint(scenario_file):
    with pytest.raises(SystemExit):
        cli.main(["eval", "--scenario", str(scenario_file), "--controller", "unilight"])


def test_compare_small(scenario_file, tmp_path):
    out = tmp_path / "cmp.csv"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"format": 1, "train": {"buffer_size": 40, "batch_size": 10}}))
    assert cli.main(["compare", "--scenario", str(scenario_file), "--config", str(cfg), "--frames", "50",
                     "--seeds", "2", "--out", str(out)]) == 0
    rows = _rows(out)
    assert {(r["controller"], r["comm"]) for r in rows} == {
        ("fixed", "none"), ("sotl", "none"), ("maxpressure", "none"), ("unilight", "none"), ("unilight", "unicomm")}
    assert sum(r["controller"] == "unilight" for r in rows) == 4
