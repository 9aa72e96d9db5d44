import numpy as np
import pytest

from smoothlab.filtering import (
    ParticleCloud,
    kalman_bucy_solve,
    ks_residual,
    log_weight_increment,
    particle_filter,
    riccati_rhs,
    systematic_resample,
)
from smoothlab.model import benchmark, make_linear_gaussian
from smoothlab.sde import TimeGrid, simulate_forward


def test_riccati_rhs_hand_values():
    assert riccati_rhs(0.0, 1.0, 1.0, 1.0, 1.0) == pytest.approx(np.zeros((1, 1)))
    assert riccati_rhs(0.0, 1.0, 0.0, 1.0, 3.7) == pytest.approx(np.ones((1, 1)))
    root = np.sqrt(2.0) - 1.0
    assert riccati_rhs(-1.0, 1.0, 1.0, 1.0, root) == pytest.approx(
        np.zeros((1, 1)), abs=1e-12
    )


def test_kalman_no_observation_brownian_variance():
    model = make_linear_gaussian(A=0.0, B=0.0, Sigma=1.0, obs_noise=1.0,
                                 initial_mean=0.0, initial_cov=0.0)
    grid = TimeGrid(0.0, 2.0, 400)
    track = kalman_bucy_solve(model, np.zeros((400, 1)), grid)
    assert track.covs[:, 0, 0] == pytest.approx(grid.nodes, abs=5 * grid.h)


def test_kalman_riccati_matches_tanh():
    model = make_linear_gaussian(A=0.0, B=1.0, Sigma=1.0, obs_noise=1.0,
                                 initial_mean=0.0, initial_cov=0.0)
    grid = TimeGrid(0.0, 2.0, 2000)
    obs = simulate_forward(model, grid, 21, 1).obs_increments
    track = kalman_bucy_solve(model, obs, grid)
    assert np.max(np.abs(track.covs[:, 0, 0] - np.tanh(grid.nodes))) <= 5 * grid.h


def test_kalman_zero_innovation_follows_drift_ode():
    model = make_linear_gaussian(A=-0.5, B=1.0, Sigma=1.0, obs_noise=1.0,
                                 initial_mean=2.0, initial_cov=1.0)
    grid = TimeGrid(0.0, 1.0, 200)
    h = grid.h
    # feed increments equal to the filter's own predicted drift -> zero innovation
    mean = 2.0
    obs = np.empty((200, 1))
    for i in range(200):
        obs[i, 0] = mean * h
        mean = mean + (-0.5) * mean * h
    track = kalman_bucy_solve(model, obs, grid)
    expected = 2.0 * (1.0 - 0.5 * h) ** np.arange(201)
    assert track.means[:, 0] == pytest.approx(expected, abs=1e-12)


def test_log_weight_increment_hand_values():
    bm = benchmark("bm")
    assert log_weight_increment(bm, np.array([2.0]), np.array([0.3]), 0.0, 0.1) == 0.0
    lg = benchmark("lg1d")
    out = log_weight_increment(lg, np.array([1.0]), np.array([0.3]), 0.0, 0.1)
    assert out == pytest.approx(0.25)
    model2 = make_linear_gaussian(
        A=np.zeros((1, 1)), B=np.array([[1.0], [0.0]]), Sigma=1.0,
        obs_noise=np.eye(2), initial_mean=0.0, initial_cov=1.0,
    )
    out2 = log_weight_increment(model2, np.array([1.0]), np.array([0.2, 5.0]), 0.0, 0.1)
    assert out2 == pytest.approx(0.15)


def test_systematic_resample_preserves_uniform():
    w = np.full(10, 0.1)
    idx = systematic_resample(w, 0.5)
    assert np.array_equal(idx, np.arange(10))


def test_particle_null_sensor_matches_forward():
    model = benchmark("bm")
    grid = TimeGrid(0.0, 1.0, 50)
    bundle = simulate_forward(model, grid, 13, n_paths=500)
    obs = bundle.obs_increments
    track = particle_filter(model, obs, grid, n_particles=500, seed=13,
                            store_history=True)
    # same noise streams + uniform weights -> identical positions
    assert np.array_equal(track.positions[-1][:, 0], bundle.signal[:, -1, 0])
    for i in range(grid.n_steps + 1):
        w = np.exp(track.log_weights[i])
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.allclose(w, 1.0 / 500)
    assert abs(track.log_normalizer[-1]) <= 1e-9


def test_particle_mean_tracks_kalman():
    model = benchmark("lg1d")
    grid = TimeGrid(0.0, 1.0, 250)
    obs = simulate_forward(model, grid, 29, 1).obs_increments
    kalman = kalman_bucy_solve(model, obs, grid)
    track = particle_filter(model, obs, grid, n_particles=20_000, seed=29)
    i = grid.node_index(1.0)
    se = np.sqrt(track.covs[i, 0, 0] / track.ess[i])
    assert abs(track.means[i, 0] - kalman.means[i, 0]) <= 3 * se + 3 * grid.h


def test_particle_preconditions():
    model = benchmark("lg1d")
    grid = TimeGrid(0.0, 1.0, 10)
    with pytest.raises(ValueError):
        particle_filter(model, np.zeros((10, 1)), grid, n_particles=1, seed=0)


def test_cloud_invariants():
    rng = np.random.default_rng(2)
    cloud = ParticleCloud(rng.normal(size=(100, 2)), rng.normal(size=100))
    assert abs(cloud.weights.sum() - 1.0) <= 1e-12
    assert 1.0 <= cloud.ess <= 100.0


def test_ks_residual_constant_and_linear():
    model = benchmark("lg1d")
    grid = TimeGrid(0.0, 1.0, 500)
    obs = simulate_forward(model, grid, 31, 1).obs_increments
    track = kalman_bucy_solve(model, obs, grid)
    assert np.max(np.abs(ks_residual(track, "1", model, obs))) == 0.0
    # Kalman mean recursion is exactly the Euler slice of the weak equation for f=x
    assert np.max(np.abs(ks_residual(track, "x", model, obs))) <= 1e-12


def test_ks_residual_particle_bm():
    model = benchmark("bm")
    grid = TimeGrid(0.0, 1.0, 100)
    obs = simulate_forward(model, grid, 37, 1).obs_increments
    track = particle_filter(model, obs, grid, n_particles=2000, seed=37,
                            store_history=True)
    res = ks_residual(track, "x", model, obs)
    se = res.std(ddof=1) / np.sqrt(res.size)
    assert abs(res.mean()) <= max(3 * se, 1e-12)
