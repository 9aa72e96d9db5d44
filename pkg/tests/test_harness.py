import json

import numpy as np
import pytest

from smoothlab.errors import ConfigError, GridMismatch, TooFewSamples
from smoothlab.harness import (
    compare_densities,
    compare_moments,
    jackknife_cov_se,
    kde_density_on_grid,
    load_config,
    run_experiment,
)
from smoothlab.pde import DensityGrid, gaussian_density_grid

BASE_CONFIG = {
    "name": "unit",
    "model": "lg1d",
    "grid": {"t_start": 0.0, "t_end": 1.0, "n_steps": 100},
    "seed": 5,
    "filter": {"mode": "kalman"},
    "score": {"kind": "exact_lg"},
    "ensemble_size": 1000,
    "snapshot_times": [0.5],
    "reference": "rts",
}


def test_jackknife_matches_normal_theory():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((20_000, 1))
    se = jackknife_cov_se(x)[0, 0]
    # Var(sample variance) = 2 sigma^4 / (N - 1) for Gaussian data
    assert se == pytest.approx(np.sqrt(2.0 / (x.shape[0] - 1)), rel=0.1)
    with pytest.raises(TooFewSamples):
        jackknife_cov_se(np.zeros((3, 1)))


def test_compare_moments_calibration():
    rng = np.random.default_rng(0)
    mean = np.array([0.5])
    cov = np.array([[2.0]])
    n_pass = n_total = 0
    for _ in range(100):
        x = rng.multivariate_normal(mean, cov, size=10_000)
        rows = compare_moments(x, mean, cov, 3.0)
        n_pass += sum(r["pass"] for r in rows)
        n_total += len(rows)
    assert n_pass / n_total >= 0.99


def test_compare_moments_gross_violation_and_guards():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((10_000, 1))
    se = x.std(ddof=1) / np.sqrt(x.shape[0])
    rows = compare_moments(x, [x.mean() + 10 * se], [[1.0]], 3.0)
    assert not rows[0]["pass"]
    with pytest.raises(TooFewSamples):
        compare_moments(np.zeros((5, 1)), [0.0], [[1.0]])


def test_compare_densities_values():
    a = gaussian_density_grid(0.0, 1.0, -8.0, 8.0, 1600)
    assert compare_densities(a, a) == 0.0
    b = gaussian_density_grid(0.0, 1.0, -8.0, 8.0, 1600)
    assert compare_densities(a, b) <= 1e-12
    shifted = gaussian_density_grid(0.1, 1.0, -8.0, 8.0, 1600)
    # closed-form L1 between N(0,1) and N(0.1,1): 2(Phi(0.05) - Phi(-0.05))
    from math import erf, sqrt
    expected = 2.0 * erf(0.05 / sqrt(2.0))
    assert compare_densities(a, shifted) == pytest.approx(expected, abs=1e-3)
    other = gaussian_density_grid(0.0, 1.0, -8.0, 8.0, 800)
    with pytest.raises(GridMismatch):
        compare_densities(a, other)


def test_kde_density_on_grid():
    rng = np.random.default_rng(9)
    samples = rng.standard_normal(100_000)
    target = gaussian_density_grid(0.0, 1.0, -8.0, 8.0, 800)
    kde = kde_density_on_grid(samples, target)
    assert compare_densities(kde, target) <= 0.05


def test_config_validation_errors():
    bad = dict(BASE_CONFIG)
    bad["snapshot_times"] = [0.333]
    with pytest.raises(ConfigError):
        load_config(bad)
    bad = dict(BASE_CONFIG)
    bad["model"] = "sine1d"
    with pytest.raises(ConfigError):  # rts oracle needs a linear-Gaussian model
        load_config(bad)
    bad = dict(BASE_CONFIG)
    bad["tolerances"] = {"z_treshold": 5.0}
    with pytest.raises(ConfigError):  # unknown (misspelled) key rejected
        load_config(bad)
    bad = dict(BASE_CONFIG)
    bad["model"] = "nope"
    with pytest.raises(ConfigError):
        load_config(bad)
    bad = dict(BASE_CONFIG)
    del bad["reference"]
    with pytest.raises(ConfigError):
        load_config(bad)
    bad = dict(BASE_CONFIG)
    bad["score"] = {"kind": "grid"}
    with pytest.raises(ConfigError):  # grid score needs the zakai filter
        load_config(bad)


def test_inline_lg_model():
    raw = dict(BASE_CONFIG)
    raw["model"] = {"A": [[0.0]], "B": [[1.0]], "Sigma": [[1.0]],
                    "obs_noise": [[1.0]], "initial_mean": [0.0],
                    "initial_cov": [[1.0]]}
    config = load_config(raw)
    report = run_experiment(config)
    assert report.overall_pass


def test_report_deterministic_and_provenance(tmp_path):
    config_a = load_config(BASE_CONFIG)
    config_b = load_config(BASE_CONFIG)
    report_a = run_experiment(config_a, out_dir=str(tmp_path / "a"))
    report_b = run_experiment(config_b, out_dir=str(tmp_path / "b"))
    body_a = (tmp_path / "a" / "report.json").read_bytes()
    body_b = (tmp_path / "b" / "report.json").read_bytes()
    assert body_a == body_b
    parsed = json.loads(body_a)
    assert parsed["provenance"]["config_hash"] == config_a.config_hash
    assert parsed["provenance"]["seed"] == 5
    assert report_a.overall_pass == report_b.overall_pass
    for row in report_a.rows:
        assert row["se"] > 0.0
    assert {p.name for p in (tmp_path / "a").iterdir()} >= {
        "report.json", "summary.txt", "observations.csv",
        "filter_track.csv", "ensemble_snapshots.csv",
    }


def test_seed_changes_report():
    raw = dict(BASE_CONFIG)
    raw["seed"] = 6
    report_a = run_experiment(load_config(BASE_CONFIG))
    report_b = run_experiment(load_config(raw))
    assert report_a.rows[0]["estimate"] != report_b.rows[0]["estimate"]
