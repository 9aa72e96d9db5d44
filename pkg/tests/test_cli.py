import json

import pytest

from smoothlab.cli import main

CONFIG = {
    "name": "cli",
    "model": "lg1d",
    "grid": {"t_start": 0.0, "t_end": 1.0, "n_steps": 100},
    "seed": 5,
    "filter": {"mode": "kalman"},
    "score": {"kind": "exact_lg"},
    "ensemble_size": 1000,
    "snapshot_times": [0.5],
    "reference": "rts",
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(CONFIG))
    return str(path)


def test_simulate_and_filter(tmp_path, config_path, capsys):
    out = str(tmp_path / "out")
    assert main(["simulate", "--config", config_path, "--out", out]) == 0
    assert (tmp_path / "out" / "signal.csv").exists()
    assert main(["filter", "--config", config_path, "--out", out]) == 0
    assert (tmp_path / "out" / "filter_track.csv").exists()


def test_smooth_and_report(tmp_path, config_path, capsys):
    out = str(tmp_path / "out")
    assert main(["smooth", "--config", config_path, "--out", out]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["overall_pass"]
    assert main(["report", "--config", str(tmp_path / "out" / "report.json")]) == 0
    captured = capsys.readouterr().out
    assert "PASS" in captured


def test_oracle(tmp_path, config_path):
    out = str(tmp_path / "out")
    assert main(["oracle", "--config", config_path, "--out", out]) == 0
    assert (tmp_path / "out" / "densities.csv").exists()


def test_reverse_rejects_active_sensor(tmp_path, config_path, capsys):
    assert main(["reverse", "--config", config_path,
                 "--out", str(tmp_path / "out")]) == 2
    assert "null sensor" in capsys.readouterr().err


def test_reverse_runs_null_sensor(tmp_path):
    raw = dict(CONFIG)
    raw.update({
        "name": "rev", "model": "ou",
        "filter": {"mode": "kalman"},
        "score": {"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]},
        "reference": "analytic", "reference_mean": [0.0],
        "reference_cov": [[1.0]], "ensemble_size": 2000,
    })
    path = tmp_path / "rev.json"
    path.write_text(json.dumps(raw))
    assert main(["reverse", "--config", str(path),
                 "--out", str(tmp_path / "out")]) == 0


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    bad = dict(CONFIG)
    bad["snapshot_times"] = [0.337]
    path.write_text(json.dumps(bad))
    assert main(["smooth", "--config", str(path),
                 "--out", str(tmp_path / "out")]) == 2
    assert "error" in capsys.readouterr().err


def test_seed_override(tmp_path, config_path):
    out1 = tmp_path / "o1"
    out2 = tmp_path / "o2"
    assert main(["smooth", "--config", config_path, "--out", str(out1)]) == 0
    assert main(["smooth", "--config", config_path, "--seed", "99",
                 "--out", str(out2)]) == 0
    a = json.loads((out1 / "report.json").read_text())
    b = json.loads((out2 / "report.json").read_text())
    assert a["provenance"]["seed"] == 5
    assert b["provenance"]["seed"] == 99
