"""Acceptance suite: one criterion per test, one printed pass/fail line each.

Each test exercises the full pipeline at the stated scale and tolerance and
prints a single summary line (visible even under pytest capture).
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from smoothlab.filtering import (
    kalman_bucy_solve,
    ks_residual,
    particle_filter,
)
from smoothlab.harness import load_config, run_experiment
from smoothlab.model import benchmark, make_linear_gaussian
from smoothlab.pde import gaussian_density_grid, solve_fokker_planck_1d, solve_zakai_1d
from smoothlab.score import ExactLGScoreSource, linear_gaussian_score
from smoothlab.filtering import GaussianBelief
from smoothlab.sde import TimeGrid, simulate_forward
from smoothlab.smoothing import (
    backward_smoothing_flow,
    duality_check,
    rts_smoother,
    semigroup_check,
    time_reversal_drift,
)


def _bundled(name: str) -> dict:
    from importlib import resources

    with resources.files("smoothlab").joinpath("configs", name).open() as fh:
        return json.load(fh)


def _emit(capsys, label: str, ok: bool, detail: str):
    line = f"{label}: {'PASS' if ok else 'FAIL'} — {detail}"
    with capsys.disabled():
        print(line)
    assert ok, line


def test_a1_lg1d_backward_ensemble_vs_rts(capsys):
    t0 = time.time()
    report = run_experiment(load_config(_bundled("lg1d_rts.json")))
    elapsed = time.time() - t0
    max_z = max(abs(r["z"]) for r in report.rows)
    _emit(capsys, "A1", report.overall_pass,
          f"lg1d N=1e5 h=1e-3 mean/var at s in (0.5, 1.0): max |z| = {max_z:.2f} "
          f"(limit 3), runtime {elapsed:.1f}s (target < 60s)")


def test_a2_lg2d_backward_ensemble_vs_rts(capsys):
    report = run_experiment(load_config(_bundled("lg2d_rts.json")))
    stats = {r["statistic"] for r in report.rows}
    assert stats == {"mean_1", "mean_2", "cov_11", "cov_12", "cov_22"}
    max_z = max(abs(r["z"]) for r in report.rows)
    _emit(capsys, "A2", report.overall_pass,
          f"lg2d N=1e5 at s=1.0, 2 means + 3 covariance entries: max |z| = {max_z:.2f}")


def test_a3_riccati_tanh_and_rts_no_observation(capsys):
    model = make_linear_gaussian(A=0.0, B=1.0, Sigma=1.0, obs_noise=1.0,
                                 initial_mean=0.0, initial_cov=0.0)
    grid = TimeGrid(0.0, 2.0, 2000)
    obs = simulate_forward(model, grid, 7, 1).obs_increments
    track = kalman_bucy_solve(model, obs, grid)
    tanh_err = float(np.max(np.abs(track.covs[:, 0, 0] - np.tanh(grid.nodes))))
    ok_tanh = tanh_err <= 5 * grid.h

    prior = make_linear_gaussian(A=-1.0, B=0.0, Sigma=np.sqrt(2.0), obs_noise=1.0,
                                 initial_mean=1.0, initial_cov=0.5)
    errs = []
    for n in (500, 1000):
        g = TimeGrid(0.0, 1.0, n)
        tr = kalman_bucy_solve(prior, np.zeros((n, 1)), g)
        rts = rts_smoother(tr, prior, g)
        errs.append(max(np.max(np.abs(rts.means - tr.means)),
                        np.max(np.abs(rts.covs - tr.covs))))
    ok_rts = errs[1] <= 0.7 * errs[0]
    _emit(capsys, "A3", ok_tanh and ok_rts,
          f"Riccati vs tanh max err {tanh_err:.2e} (limit {5 * grid.h:.0e}); "
          f"B=0 RTS drift {errs[0]:.2e} -> {errs[1]:.2e} under h-halving")


def test_a4_stationary_ou_time_reversal(capsys):
    report = run_experiment(load_config(_bundled("ou_reversal.json")))
    max_z = max(abs(r["z"]) for r in report.rows)

    model = benchmark("ou")
    alpha = 2.0 * np.ones((1, 1))

    def score_at(u, x):
        return linear_gaussian_score(GaussianBelief(np.zeros(1), np.ones((1, 1))),
                                     alpha, x)

    rng = np.random.default_rng(7)
    drift_err = 0.0
    for _ in range(100):
        x = rng.normal(size=(1,)) * 2.5
        drift = time_reversal_drift(model, score_at, 5.0, float(rng.uniform(0.1, 4.9)), x)
        drift_err = max(drift_err, float(np.max(np.abs(drift + x))))
    ok = report.overall_pass and drift_err <= 1e-12
    _emit(capsys, "A4", ok,
          f"OU N=1e5 marginals at s in 1..4 vs N(0,1): max |z| = {max_z:.2f}; "
          f"reversal drift vs -x at 100 probes: max err {drift_err:.1e} (limit 1e-12)")


def test_a5_sine1d_nonlinear_certification(capsys):
    report = run_experiment(load_config(_bundled("sine1d_pde.json")))
    max_l1 = max(r["estimate"] for r in report.rows if r["statistic"] == "kde_l1")
    _emit(capsys, "A5", report.overall_pass,
          f"sine1d N=1e5 vs backward-density oracle at s in (0.5, 1.0): "
          f"moments within max(3 SE, 2 dx); max KDE L1 = {max_l1:.3f} (limit 0.05)")


def test_a6_particle_filter_vs_kalman(capsys):
    model = benchmark("lg1d")
    grid = TimeGrid(0.0, 2.0, 2000)
    obs = simulate_forward(model, grid, 7, 1).obs_increments
    kalman = kalman_bucy_solve(model, obs, grid)
    track = particle_filter(model, obs, grid, n_particles=50_000, seed=7)
    max_z = 0.0
    for t in (1.0, 2.0):
        i = grid.node_index(t)
        se = np.sqrt(track.covs[i, 0, 0] / track.ess[i])
        max_z = max(max_z, abs(track.means[i, 0] - kalman.means[i, 0]) / se)
    ok_mean = max_z <= 3.0

    small_grid = TimeGrid(0.0, 2.0, 200)
    obs_small = simulate_forward(model, small_grid, 7, 1).obs_increments
    hist = particle_filter(model, obs_small, small_grid, n_particles=50_000,
                           seed=7, store_history=True)
    weight_err = float(np.max(np.abs(np.exp(hist.log_weights).sum(axis=1) - 1.0)))
    ok_weights = weight_err <= 1e-12
    _emit(capsys, "A6", ok_mean and ok_weights,
          f"particle N=5e4 mean vs Kalman at t in (1, 2): max |z| = {max_z:.2f}; "
          f"normalized weight sums off by at most {weight_err:.1e} (limit 1e-12)")


def test_a7_weak_equation_residuals(capsys):
    model = benchmark("lg1d")
    results = {}
    for f in ("x", "x2"):
        maxes = []
        for n in (2000, 4000):
            grid = TimeGrid(0.0, 2.0, n)
            obs = simulate_forward(model, grid, 7, 1).obs_increments
            track = kalman_bucy_solve(model, obs, grid)
            r = ks_residual(track, f, model, obs)
            maxes.append((grid.h, float(np.max(np.abs(r)))))
        results[f] = maxes
    # f = x: the Kalman mean recursion satisfies the Euler slice exactly
    ok_x = all(m <= 1e-12 for _, m in results["x"])
    # f = x^2: criterion demands max |r_i| <= C h^2 with ratio ~ 4 under h-halving
    (h1, m1), (h2, m2) = results["x2"]
    fitted_c = m1 / h1**2
    ratio = m1 / m2 if m2 > 0 else float("inf")
    ok_x2 = 3.0 <= ratio <= 5.0

    bm = benchmark("bm")
    grid = TimeGrid(0.0, 1.0, 1000)
    obs = simulate_forward(bm, grid, 7, 1).obs_increments
    hist = particle_filter(bm, obs, grid, n_particles=5000, seed=7,
                           store_history=True)
    res = ks_residual(hist, "x", bm, obs)
    se = res.std(ddof=1) / np.sqrt(res.size)
    z_bm = abs(res.mean()) / se if se > 0 else 0.0
    ok_bm = z_bm <= 3.0

    _emit(capsys, "A7", ok_x and ok_x2 and ok_bm,
          f"f=x max |r| = {results['x'][0][1]:.1e} (exact); "
          f"f=x^2 fitted C = {fitted_c:.0f}, h-halving ratio = {ratio:.2f} "
          f"(required ~4; observed O(h) scaling, see notes on the quadratic "
          f"variation term R^2(dI^2 - h) in the discrete slice); "
          f"bm f=x residual-mean |z| = {z_bm:.2f}")


def test_a8_semigroup_and_duality(capsys):
    model = benchmark("lg1d")
    grid = TimeGrid(0.0, 2.0, 2000)
    obs = simulate_forward(model, grid, 7, 1).obs_increments
    track = kalman_bucy_solve(model, obs, grid)
    source = ExactLGScoreSource(track, model)
    semi = semigroup_check(model, source, track, t=2.0, u=1.0, s=0.5,
                           n_members=50_000, seed=7)
    ok_semi = semi.max_abs_z <= 3.0

    ens = backward_smoothing_flow(model, source, track, grid, 50_000, 7,
                                  snapshot_steps=[grid.node_index(0.5), grid.n_steps])
    dual = duality_check(model, track, ens, "x", "x", s=0.5)
    ones = duality_check(model, track, ens, "1", "1", s=0.5)
    ok_dual = abs(dual.z) <= 3.0
    ok_ones = abs(ones.mc_value - ones.reference) <= 1e-12
    _emit(capsys, "A8", ok_semi and ok_dual and ok_ones,
          f"semigroup (t,u,s)=(2,1,0.5) N=5e4: max |z| = {semi.max_abs_z:.2f}; "
          f"duality f=g=x: |z| = {abs(dual.z):.2f}; f=g=1 exact to "
          f"{abs(ones.mc_value - ones.reference):.1e}")


def test_a9_pde_oracle_self_checks(capsys):
    model = benchmark("lg1d")
    grid = TimeGrid(0.0, 2.0, 400)
    obs = simulate_forward(model, grid, 7, 1).obs_increments
    kalman = kalman_bucy_solve(model, obs, grid)

    dx = 0.01
    init = gaussian_density_grid(0.0, 1.0, -8.0, 8.0, int(16 / dx))
    zakai = solve_zakai_1d(model, obs, init, grid)
    mass_err = max(abs(d.mass() - 1.0) for d in zakai.densities)
    ok_mass = mass_err <= 1e-6
    moment_err = 0.0
    ok_kalman = True
    for i in range(0, 401, 25):
        mean, var = zakai.densities[i].moments()
        tol = max(0.02 * max(1.0, abs(kalman.means[i, 0])), 5 * dx)
        moment_err = max(moment_err,
                         abs(mean - kalman.means[i, 0]), abs(var - kalman.covs[i, 0, 0]))
        ok_kalman &= (abs(mean - kalman.means[i, 0]) <= tol
                      and abs(var - kalman.covs[i, 0, 0]) <= tol)

    short = TimeGrid(0.0, 0.5, 200)
    obs_short = obs[:200]
    kal_short = kalman_bucy_solve(model, obs_short, short)
    errs = []
    for n in (80, 160):
        init_c = gaussian_density_grid(0.0, 1.0, -8.0, 8.0, n)
        zk = solve_zakai_1d(model, obs_short, init_c, short)
        final = zk.densities[-1]
        ref = (np.exp(-0.5 * (final.xs - kal_short.means[-1, 0]) ** 2
                      / kal_short.covs[-1, 0, 0])
               / np.sqrt(2 * np.pi * kal_short.covs[-1, 0, 0]))
        errs.append(float(np.trapezoid(np.abs(final.values - ref), dx=final.dx)))
    ratio = errs[0] / errs[1]
    ok_dx = 2.5 <= ratio <= 6.0
    _emit(capsys, "A9", ok_mass and ok_kalman and ok_dx,
          f"mass within {mass_err:.1e} of 1 (limit 1e-6); Zakai vs Kalman moment "
          f"err {moment_err:.3f} within max(2%, 5 dx); dx-halving L1 ratio = {ratio:.2f}")


def test_a10_determinism_across_thread_settings(capsys, tmp_path):
    outputs = []
    for threads in ("1", "8"):
        out = tmp_path / f"t{threads}"
        env = dict(os.environ, SMOOTHLAB_THREADS=threads)
        proc = subprocess.run(
            [sys.executable, "-m", "smoothlab.cli", "verify", "--quick",
             "--seed", "7", "--out", str(out)],
            env=env, capture_output=True, text=True, timeout=600,
        )
        assert proc.returncode == 0, proc.stderr
        outputs.append((out / "report.json").read_bytes()
                       + (out / "summary.txt").read_bytes())
    ok = outputs[0] == outputs[1]
    _emit(capsys, "A10", ok,
          f"verify run twice (SMOOTHLAB_THREADS=1 vs 8): report bodies "
          f"{'byte-identical' if ok else 'differ'} ({len(outputs[0])} bytes)")
