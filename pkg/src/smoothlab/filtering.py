"""Filtering along the time grid: exact Kalman-Bucy and bootstrap particles.

Both filters share the Euler discretization of the SDE engine so that the
backward smoothing pass can consume their per-node quantities without
interpolation. The weak Kushner-Stratonovich residual gives a per-step
consistency diagnostic for either track.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    NonFiniteState,
    SingularNoise,
    UnsupportedTestFunction,
    WeightCollapse,
)
from .model import ModelSpec, alpha_at
from .polynomials import as_quadratic
from .sde import (
    STREAM_INIT,
    STREAM_RESAMPLE,
    STREAM_SIGNAL,
    NoiseStream,
    TimeGrid,
    apply_matrix,
    sample_initial,
)

_COND_GUARD = 1e12


def clamp_psd(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and clip tiny negative eigenvalues to zero."""
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    if w.min() >= 0.0:
        return cov
    return (v * np.clip(w, 0.0, None)) @ v.T


def _inv_beta(beta: np.ndarray) -> np.ndarray:
    if np.linalg.cond(beta) > _COND_GUARD:
        raise SingularNoise("observation noise covariance is numerically singular")
    return np.linalg.inv(beta)


@dataclass(frozen=True)
class GaussianBelief:
    """Filtering marginal (mean, cov) in the linear-Gaussian case."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass
class ParticleCloud:
    """Weighted particle approximation of the filtering law."""

    positions: np.ndarray   # (N, m)
    log_weights: np.ndarray  # (N,)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights - self.log_weights.max()
        w = np.exp(lw)
        return w / w.sum()

    @property
    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.sum(w * w))

    def mean_cov(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.weights
        mean = w @ self.positions
        d = self.positions - mean
        cov = (d * w[:, None]).T @ d
        return mean, clamp_psd(cov)


@dataclass
class FilterTrack:
    """Per-node filtering summary on a shared time grid.

    Gaussian mode carries the exact Kalman-Bucy means/covariances; particle
    mode carries moment estimates, ESS, the terminal cloud, and optionally
    the full particle history (positions/log_weights per node).
    """

    grid: TimeGrid
    mode: str                    # "gaussian" | "particle"
    means: np.ndarray            # (n_steps + 1, m)
    covs: np.ndarray             # (n_steps + 1, m, m)
    pi_b: np.ndarray             # (n_steps + 1, dim_obs), predicted sensor mean
    log_normalizer: np.ndarray   # (n_steps + 1,), cumulative log gamma(1)
    ess: Optional[np.ndarray] = None
    terminal_cloud: Optional[ParticleCloud] = None
    positions: Optional[np.ndarray] = None     # (n_steps + 1, N, m)
    log_weights: Optional[np.ndarray] = None   # (n_steps + 1, N)

    def belief(self, step: int) -> GaussianBelief:
        return GaussianBelief(mean=self.means[step], cov=self.covs[step])

    def cloud(self, step: int) -> ParticleCloud:
        if self.positions is None:
            raise ValueError("particle history was not stored (store_history=False)")
        return ParticleCloud(self.positions[step], self.log_weights[step])


def riccati_rhs(A: np.ndarray, alpha: np.ndarray, B: np.ndarray, beta: np.ndarray,
                R: np.ndarray) -> np.ndarray:
    """A R + R A' + alpha - R B' beta^-1 B R, symmetrized."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    R = np.atleast_2d(R)
    alpha = np.atleast_2d(alpha)
    gain = R @ B.T @ _inv_beta(np.atleast_2d(beta)) @ B @ R
    out = A @ R + R @ A.T + alpha - gain
    return 0.5 * (out + out.T)


def kalman_bucy_solve(model: ModelSpec, obs_increments: np.ndarray,
                      grid: TimeGrid) -> FilterTrack:
    """Euler integration of the Kalman-Bucy mean and Riccati covariance.

    X^_{i+1} = X^_i + A X^_i h + R_i B' beta^-1 (DY_i - B X^_i h),
    R_{i+1} = R_i + rhs(R_i) h, clamped symmetric PSD each step.
    """
    if model.linear is None:
        raise DimensionMismatch("kalman_bucy_solve requires a linear-Gaussian model")
    obs_increments = np.atleast_2d(np.asarray(obs_increments, dtype=float))
    if obs_increments.shape != (grid.n_steps, model.dim_obs):
        raise DimensionMismatch(
            f"obs_increments must have shape ({grid.n_steps}, {model.dim_obs})"
        )
    lg = model.linear
    h = grid.h
    m = model.dim_state
    nodes = grid.nodes
    means = np.empty((grid.n_steps + 1, m))
    covs = np.empty((grid.n_steps + 1, m, m))
    pi_b = np.empty((grid.n_steps + 1, model.dim_obs))
    log_norm = np.zeros(grid.n_steps + 1)
    means[0] = model.initial_mean
    covs[0] = clamp_psd(model.initial_cov)
    pi_b[0] = lg.B(nodes[0]) @ means[0]
    for i in range(grid.n_steps):
        u = nodes[i]
        A, B = lg.A(u), lg.B(u)
        alpha = lg.Sigma(u) @ lg.Sigma(u).T
        beta = model.beta_at(u)
        beta_inv = _inv_beta(beta)
        xh, R = means[i], covs[i]
        predicted = B @ xh
        innovation = obs_increments[i] - predicted * h
        means[i + 1] = xh + A @ xh * h + R @ B.T @ beta_inv @ innovation
        covs[i + 1] = clamp_psd(R + riccati_rhs(A, alpha, B, beta, R) * h)
        if not np.all(np.isfinite(means[i + 1])):
            raise NonFiniteState(f"Kalman mean diverged at step {i}")
        pi_b[i + 1] = lg.B(nodes[i + 1]) @ means[i + 1]
        log_norm[i + 1] = log_norm[i] + predicted @ beta_inv @ obs_increments[i] \
            - 0.5 * predicted @ beta_inv @ predicted * h
    return FilterTrack(grid=grid, mode="gaussian", means=means, covs=covs,
                       pi_b=pi_b, log_normalizer=log_norm)


def log_weight_increment(model: ModelSpec, x: np.ndarray, dy: np.ndarray,
                         u: float, h: float) -> np.ndarray:
    """Euler slice of the log likelihood functional at state(s) x.

    b_u(x)' beta^-1 dy - (1/2) b_u(x)' beta^-1 b_u(x) h, vectorized over a
    leading batch axis of x.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    b = np.asarray(model.sensor(u, x), dtype=float)
    beta_inv = _inv_beta(model.beta_at(u))
    dy = np.atleast_1d(np.asarray(dy, dtype=float))
    return b @ beta_inv @ dy - 0.5 * np.einsum("...i,ij,...j->...", b, beta_inv, b) * h


def systematic_resample(weights: np.ndarray, u01: float) -> np.ndarray:
    """Systematic resampling indices from one uniform draw in [0, 1)."""
    n = weights.size
    points = (u01 + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), points).clip(0, n - 1)


def particle_filter(model: ModelSpec, obs_increments: np.ndarray, grid: TimeGrid,
                    n_particles: int, seed: int, resample_threshold: float = 0.5,
                    store_history: bool = False) -> FilterTrack:
    """Bootstrap particle filter on the shared Euler grid.

    Particles propagate by the signal dynamics (same noise stream layout as
    simulate_forward, so with a null sensor the cloud reproduces the forward
    ensemble exactly), weights accumulate the likelihood slices, and
    systematic resampling triggers when ESS < resample_threshold * N.
    """
    if n_particles < 2:
        raise ValueError("n_particles must be >= 2")
    obs_increments = np.atleast_2d(np.asarray(obs_increments, dtype=float))
    if obs_increments.shape != (grid.n_steps, model.dim_obs):
        raise DimensionMismatch(
            f"obs_increments must have shape ({grid.n_steps}, {model.dim_obs})"
        )
    h = grid.h
    sqrt_h = np.sqrt(h)
    nodes = grid.nodes
    sig_stream = NoiseStream(seed, STREAM_SIGNAL)
    res_stream = NoiseStream(seed, STREAM_RESAMPLE)
    x = sample_initial(model, n_particles, NoiseStream(seed, STREAM_INIT))
    log_w = np.zeros(n_particles)

    n_nodes = grid.n_steps + 1
    means = np.empty((n_nodes, model.dim_state))
    covs = np.empty((n_nodes, model.dim_state, model.dim_state))
    pi_b = np.empty((n_nodes, model.dim_obs))
    ess = np.empty(n_nodes)
    log_norm = np.zeros(n_nodes)
    positions = np.empty((n_nodes, n_particles, model.dim_state)) if store_history else None
    log_weights_hist = np.empty((n_nodes, n_particles)) if store_history else None

    for i in range(n_nodes):
        cloud = ParticleCloud(x, log_w.copy())
        w = cloud.weights
        means[i], covs[i] = cloud.mean_cov()
        b = np.asarray(model.sensor(nodes[i], x), dtype=float)
        pi_b[i] = w @ b
        ess[i] = cloud.ess
        if store_history:
            positions[i] = x
            log_weights_hist[i] = np.log(w)
        if i == n_nodes - 1:
            break

        # Likelihood slice for the increment over [u_i, u_{i+1}].
        dlog = log_weight_increment(model, x, obs_increments[i], nodes[i], h)
        shifted = np.log(w) + dlog
        peak = shifted.max()
        if not np.isfinite(peak):
            raise WeightCollapse(f"all particle weights underflowed at step {i}")
        log_norm[i + 1] = log_norm[i] + peak + np.log(np.sum(np.exp(shifted - peak)))
        log_w = shifted

        w_new = ParticleCloud(x, log_w.copy()).weights
        if 1.0 / np.sum(w_new * w_new) < resample_threshold * n_particles:
            idx = systematic_resample(w_new, res_stream.uniform(i))
            x = x[idx]
            log_w = np.zeros(n_particles)

        xi = sig_stream.normals(i, n_particles, model.dim_noise)
        x = x + np.asarray(model.drift(nodes[i], x), dtype=float) * h \
            + apply_matrix(model.diffusion(nodes[i], x), xi) * sqrt_h
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"particle cloud diverged at step {i}")

    return FilterTrack(grid=grid, mode="particle", means=means, covs=covs,
                       pi_b=pi_b, log_normalizer=log_norm, ess=ess,
                       terminal_cloud=ParticleCloud(x, log_w),
                       positions=positions, log_weights=log_weights_hist)


def _lg_expectation_Lf(poly, A, alpha, mean, cov) -> float:
    # E[L f] under N(mean, cov) for linear drift A x: L f = grad f' A x + tr(C2 alpha).
    M = poly.c2 @ A
    return float(
        poly.c1 @ (A @ mean)
        + 2.0 * (np.trace(M @ cov) + mean @ M @ mean)
        + np.trace(poly.c2 @ alpha)
    )


def ks_residual(track: FilterTrack, f, model: ModelSpec,
                obs_increments: np.ndarray) -> np.ndarray:
    """Per-step residual of the Euler slice of the weak filtering equation.

    r_i = pi_{u+h}(f) - pi_u(f) - pi_u(L_u f) h
          - pi_u(f bbar_u)' beta^-1 (DY_i - pi_u(b_u) h)

    f must be a quadratic polynomial; Gaussian tracks require a
    linear-Gaussian model so every term is available in closed form.
    """
    poly = as_quadratic(f, model.dim_state)
    obs_increments = np.atleast_2d(np.asarray(obs_increments, dtype=float))
    grid = track.grid
    h = grid.h
    nodes = grid.nodes
    res = np.empty(grid.n_steps)
    if track.mode == "gaussian":
        if model.linear is None:
            raise UnsupportedTestFunction(
                "Gaussian-mode residual needs a linear-Gaussian model"
            )
        lg = model.linear
        for i in range(grid.n_steps):
            u = nodes[i]
            A, B = lg.A(u), lg.B(u)
            alpha = lg.Sigma(u) @ lg.Sigma(u).T
            beta_inv = _inv_beta(model.beta_at(u))
            mean, cov = track.means[i], track.covs[i]
            pi_f = poly.gaussian_mean(mean, cov)
            pi_f_next = poly.gaussian_mean(track.means[i + 1], track.covs[i + 1])
            pi_Lf = _lg_expectation_Lf(poly, A, alpha, mean, cov)
            pi_f_bbar = B @ poly.gaussian_state_cov(mean, cov)
            innovation = obs_increments[i] - track.pi_b[i] * h
            res[i] = pi_f_next - pi_f - pi_Lf * h - pi_f_bbar @ beta_inv @ innovation
    elif track.mode == "particle":
        if track.positions is None:
            raise ValueError("particle residual needs store_history=True")
        for i in range(grid.n_steps):
            u = nodes[i]
            x, w = track.positions[i], np.exp(track.log_weights[i])
            x1, w1 = track.positions[i + 1], np.exp(track.log_weights[i + 1])
            fx = poly(x)
            pi_f = w @ fx
            pi_f_next = w1 @ poly(x1)
            a = np.asarray(model.drift(u, x), dtype=float)
            alpha = alpha_at(model, u, x)
            trace_term = np.einsum("ij,...ji->...", poly.c2, alpha)
            Lf = np.einsum("...i,...i->...", poly.gradient(x), a) + trace_term
            pi_Lf = w @ Lf
            b = np.asarray(model.sensor(u, x), dtype=float)
            bbar = b - track.pi_b[i]
            pi_f_bbar = (w * fx) @ bbar
            beta_inv = _inv_beta(model.beta_at(u))
            innovation = obs_increments[i] - track.pi_b[i] * h
            res[i] = pi_f_next - pi_f - pi_Lf * h - pi_f_bbar @ beta_inv @ innovation
    else:
        raise ValueError(f"unknown track mode {track.mode!r}")
    return res
