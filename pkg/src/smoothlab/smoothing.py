"""Backward smoothing: diffusion ensemble, RTS recursions, and verifiers.

The central object is the ensemble sampler of the backward smoothing
diffusion: members start from the filtering law at the horizon and step the
backward Euler slice (drift correction minus signal drift, fresh Brownian
noise independent of the observations) down the shared grid, so that the
marginal at node s approximates the smoothing law conditioned on data up to
the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    GridMismatch,
    SingularCovariance,
    SmoothlabError,
    UnsupportedTestFunction,
)
from .filtering import FilterTrack, clamp_psd
from .model import ModelSpec, alpha_at
from .pde import DensityGrid, DensityTrack, sample_from_density
from .polynomials import QuadraticPolynomial, as_quadratic
from .score import grid_score
from .sde import (
    STREAM_BACKWARD,
    STREAM_TERMINAL,
    NoiseStream,
    TimeGrid,
    backward_step,
)

_COND_GUARD = 1e12


@dataclass
class SmoothingEnsemble:
    """Backward-ensemble states at selected grid nodes.

    states[:, j] holds the members at snapshot_steps[j]; the start node of
    the flow is always the last snapshot and equals the terminal sample
    exactly.
    """

    grid: TimeGrid
    snapshot_steps: tuple
    states: np.ndarray       # (n_members, n_snapshots, m)
    terminal_source: str

    def marginal(self, step: int) -> np.ndarray:
        try:
            j = self.snapshot_steps.index(step)
        except ValueError:
            raise GridMismatch(f"node {step} was not snapshotted") from None
        return self.states[:, j]

    def marginal_at(self, t: float) -> np.ndarray:
        return self.marginal(self.grid.node_index(t))


@dataclass
class RtsTrack:
    """Smoothed Gaussian marginals (mean, cov) per grid node."""

    grid: TimeGrid
    means: np.ndarray  # (n_steps + 1, m)
    covs: np.ndarray   # (n_steps + 1, m, m)


def _gaussian_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(np.atleast_2d(cov))
    return v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _sample_terminal(track, step: int, n_members: int,
                     stream: NoiseStream) -> tuple[np.ndarray, str]:
    if isinstance(track, DensityTrack):
        draws = sample_from_density(track.density(step), stream.uniforms(step, n_members))
        return draws[:, None], "grid inverse-cdf"
    if track.mode == "gaussian":
        z = stream.normals(step, n_members, track.means.shape[1])
        root = _gaussian_sqrt(track.covs[step])
        return track.means[step] + z @ root.T, "gaussian draw"
    if track.mode == "particle":
        if step != track.grid.n_steps:
            raise GridMismatch("particle terminal sampling only at the final node")
        cloud = track.terminal_cloud
        # systematic resampling generalized to n_members output points
        points = (stream.uniform(step) + np.arange(n_members)) / n_members
        idx = np.searchsorted(np.cumsum(cloud.weights), points).clip(0, cloud.n_particles - 1)
        return cloud.positions[idx], "particle systematic resample"
    raise GridMismatch(f"unsupported track mode {getattr(track, 'mode', None)!r}")


def backward_smoothing_flow(
    model: ModelSpec,
    score_source: Callable[[int, float, np.ndarray], np.ndarray],
    filter_track,
    grid: TimeGrid,
    n_members: int,
    seed: int,
    snapshot_steps: Optional[Sequence[int]] = None,
    start_step: Optional[int] = None,
    end_step: int = 0,
    noise_stream_offset: int = 0,
) -> SmoothingEnsemble:
    """Sample the backward smoothing ensemble down the grid.

    Members are drawn from the filtering law at the start node (Gaussian
    draw, terminal-cloud resample, or grid inverse-CDF, depending on the
    track), then iterate the backward Euler step with the score evaluated at
    each member's current state. The backward Brownian stream is keyed apart
    from every forward stream, hence independent of the observations.
    """
    if filter_track.grid != grid:
        raise GridMismatch("filter track and smoothing flow must share one grid")
    start = grid.n_steps if start_step is None else start_step
    if not (0 <= end_step < start <= grid.n_steps):
        raise GridMismatch(f"invalid flow range [{end_step}, {start}]")
    wanted = set(snapshot_steps) if snapshot_steps is not None \
        else set(range(end_step, start + 1))
    wanted.add(start)
    if any(j < end_step or j > start for j in wanted):
        raise GridMismatch("snapshot steps must lie inside the flow range")
    order = sorted(wanted)

    terminal_stream = NoiseStream(seed, STREAM_TERMINAL + noise_stream_offset)
    noise_stream = NoiseStream(seed, STREAM_BACKWARD + noise_stream_offset)
    x, source = _sample_terminal(filter_track, start, n_members, terminal_stream)
    states = np.empty((n_members, len(order), model.dim_state))
    if start in wanted:
        states[:, order.index(start)] = x
    nodes = grid.nodes
    h = grid.h
    for i in range(start, end_step, -1):
        u = nodes[i]
        try:
            score = np.asarray(score_source(i, u, x), dtype=float).reshape(x.shape)
        except SmoothlabError as err:
            err.args = (f"score evaluation failed at node {i} (t={u}): {err}",)
            raise
        noise = noise_stream.normals(i, n_members, model.dim_noise)
        x = backward_step(x, u, h, model, score, noise)
        if (i - 1) in wanted:
            states[:, order.index(i - 1)] = x
    return SmoothingEnsemble(grid=grid, snapshot_steps=tuple(order),
                             states=states, terminal_source=source)


def rts_backward_step(A: np.ndarray, alpha: np.ndarray, filter_mean: np.ndarray,
                      filter_cov: np.ndarray, mean: np.ndarray, cov: np.ndarray,
                      h: float) -> tuple[np.ndarray, np.ndarray]:
    """One Euler slice of the backward smoothed-moment ODEs at time s.

    mean_{s-h} = mean_s - h (A mean_s + alpha R_s^-1 (mean_s - filter_mean_s)),
    cov_{s-h}  = cov_s - h (G cov_s + cov_s G' - alpha), G = A + alpha R_s^-1.
    """
    A = np.atleast_2d(A)
    alpha = np.atleast_2d(alpha)
    R = np.atleast_2d(filter_cov)
    cov = np.atleast_2d(cov)
    if np.linalg.cond(R) > _COND_GUARD:
        raise SingularCovariance("filter covariance is numerically singular")
    R_inv = np.linalg.inv(R)
    G = A + alpha @ R_inv
    mean_rhs = A @ np.atleast_1d(mean) + alpha @ R_inv @ (np.atleast_1d(mean)
                                                         - np.atleast_1d(filter_mean))
    cov_rhs = G @ cov + cov @ G.T - alpha
    return np.atleast_1d(mean) - h * mean_rhs, clamp_psd(cov - h * cov_rhs)


def rts_smoother(kalman_track: FilterTrack, model: ModelSpec,
                 grid: TimeGrid) -> RtsTrack:
    """Backward Euler integration of the smoothed mean/covariance recursions.

    d/ds mean_s = A_s mean_s + alpha_s R_s^-1 (mean_s - filter_mean_s),
    d/ds cov_s  = G_s cov_s + cov_s G_s' - alpha_s with G_s = A_s + alpha_s R_s^-1,
    terminal condition at the filter's last node.
    """
    if model.linear is None:
        raise SingularCovariance("rts_smoother requires a linear-Gaussian model")
    if kalman_track.grid != grid or kalman_track.mode != "gaussian":
        raise GridMismatch("rts_smoother needs a Gaussian track on the same grid")
    lg = model.linear
    n = grid.n_steps
    h = grid.h
    nodes = grid.nodes
    means = np.empty_like(kalman_track.means)
    covs = np.empty_like(kalman_track.covs)
    means[n] = kalman_track.means[n]
    covs[n] = kalman_track.covs[n]
    for i in range(n, 0, -1):
        u = nodes[i]
        A = lg.A(u)
        alpha = lg.Sigma(u) @ lg.Sigma(u).T
        try:
            means[i - 1], covs[i - 1] = rts_backward_step(
                A, alpha, kalman_track.means[i], kalman_track.covs[i],
                means[i], covs[i], h,
            )
        except SingularCovariance as err:
            err.args = (f"filter covariance singular at node {i}: {err}",)
            raise
    return RtsTrack(grid=grid, means=means, covs=covs)


def time_reversal_drift(model: ModelSpec, score_at: Callable[[float, np.ndarray], np.ndarray],
                        t_horizon: float, s: float, x: np.ndarray) -> np.ndarray:
    """Drift of the time-reversed signal at elapsed reversal time s.

    Requires a null sensor; score_at(u, x) must return the signal-density
    score p_u^-1 div_alpha(p_u)(x). The reversed drift at state x is
    score - a evaluated at the original time t_horizon - s.
    """
    u = t_horizon - s
    x = np.asarray(x, dtype=float)
    b = np.asarray(model.sensor(u, x), dtype=float)
    if not np.allclose(b, 0.0, atol=1e-12):
        raise ValueError("time reversal of the signal requires a null sensor")
    return np.asarray(score_at(u, x), dtype=float) - np.asarray(model.drift(u, x), dtype=float)


# ---------------------------------------------------------------------------
# Statistical verifiers
# ---------------------------------------------------------------------------

def _moment_rows(xa: np.ndarray, xb: np.ndarray) -> list[dict]:
    """Two-sample mean/covariance z-scores between ensembles xa and xb."""
    from .harness import jackknife_cov_se  # local import to avoid a cycle

    rows = []
    m = xa.shape[1]
    mean_a, mean_b = xa.mean(axis=0), xb.mean(axis=0)
    se_a = xa.std(axis=0, ddof=1) / np.sqrt(xa.shape[0])
    se_b = xb.std(axis=0, ddof=1) / np.sqrt(xb.shape[0])
    for j in range(m):
        se = float(np.hypot(se_a[j], se_b[j]))
        diff = float(mean_a[j] - mean_b[j])
        rows.append({"statistic": f"mean_{j + 1}", "difference": diff,
                     "se": se, "z": diff / se if se > 0 else 0.0})
    cov_a = np.cov(xa, rowvar=False).reshape(m, m)
    cov_b = np.cov(xb, rowvar=False).reshape(m, m)
    jse_a = jackknife_cov_se(xa)
    jse_b = jackknife_cov_se(xb)
    for i in range(m):
        for j in range(i, m):
            se = float(np.hypot(jse_a[i, j], jse_b[i, j]))
            diff = float(cov_a[i, j] - cov_b[i, j])
            rows.append({"statistic": f"cov_{i + 1}{j + 1}", "difference": diff,
                         "se": se, "z": diff / se if se > 0 else 0.0})
    return rows


@dataclass
class SemigroupReport:
    """Moment comparison between direct and composed backward flows."""

    rows: list
    max_abs_z: float
    max_state_diff: float


def semigroup_check(model: ModelSpec, score_source, filter_track, t: float,
                    u: float, s: float, n_members: int, seed: int,
                    grid: Optional[TimeGrid] = None) -> SemigroupReport:
    """Distributional check of the backward semigroup composition law.

    Runs the flow t -> s directly and as t -> u followed by a restart
    (fresh backward noise) u -> s; compares the s-marginal moments. The two
    marginals share the leg t -> u pathwise, so the report also carries the
    raw member-wise difference (exactly zero for deterministic flows).
    """
    grid = grid if grid is not None else filter_track.grid
    i_t, i_u, i_s = grid.node_index(t), grid.node_index(u), grid.node_index(s)
    if not (i_s < i_u < i_t):
        raise ValueError("semigroup check needs s < u < t on grid nodes")
    direct = backward_smoothing_flow(
        model, score_source, filter_track, grid, n_members, seed,
        snapshot_steps=[i_s, i_u, i_t], start_step=i_t, end_step=i_s,
    )
    mid = direct.marginal(i_u)
    # second leg restarted with a fresh stream, terminal fixed at the u-states
    composed_states = _restart_leg(model, score_source, grid, mid, i_u, i_s,
                                   seed, noise_stream_offset=100)
    rows = _moment_rows(direct.marginal(i_s), composed_states)
    max_z = max(abs(r["z"]) for r in rows)
    max_diff = float(np.max(np.abs(direct.marginal(i_s) - composed_states)))
    return SemigroupReport(rows=rows, max_abs_z=max_z, max_state_diff=max_diff)


def _restart_leg(model, score_source, grid, x0, start, end, seed,
                 noise_stream_offset) -> np.ndarray:
    noise_stream = NoiseStream(seed, STREAM_BACKWARD + noise_stream_offset)
    x = x0.copy()
    nodes = grid.nodes
    for i in range(start, end, -1):
        score = np.asarray(score_source(i, nodes[i], x), dtype=float).reshape(x.shape)
        noise = noise_stream.normals(i, x.shape[0], model.dim_noise)
        x = backward_step(x, nodes[i], grid.h, model, score, noise)
    return x


def gaussian_quadratic_product_mean(f: QuadraticPolynomial, g: QuadraticPolynomial,
                                    mean: np.ndarray, cov: np.ndarray) -> float:
    """E[f(z_1) g(z_2)] for z = (z_1, z_2) jointly Gaussian, f, g quadratic.

    f acts on the first block of z and g on the second; the expectation is
    the exact Gaussian quartic moment (Isserlis).
    """
    m = f.dim
    dim = 2 * m
    mean = np.asarray(mean, dtype=float).reshape(dim)
    cov = np.asarray(cov, dtype=float).reshape(dim, dim)
    a = np.zeros(dim)
    a[:m] = f.c1
    A = np.zeros((dim, dim))
    A[:m, :m] = f.c2
    b = np.zeros(dim)
    b[m:] = g.c1
    B = np.zeros((dim, dim))
    B[m:, m:] = g.c2
    tA, tB = np.trace(A @ cov), np.trace(B @ cov)
    qA, qB = mean @ A @ mean, mean @ B @ mean
    val = f.c0 * g.c0
    val += f.c0 * (b @ mean + tB + qB)
    val += g.c0 * (a @ mean + tA + qA)
    val += a @ cov @ b + (a @ mean) * (b @ mean)
    val += (a @ mean) * (qB + tB) + 2.0 * a @ cov @ B @ mean
    val += (b @ mean) * (qA + tA) + 2.0 * b @ cov @ A @ mean
    val += qA * qB + qA * tB + qB * tA + 4.0 * mean @ A @ cov @ B @ mean \
        + tA * tB + 2.0 * np.trace(A @ cov @ B @ cov)
    return float(val)


@dataclass
class DualityReport:
    """Monte-Carlo versus joint-Gaussian sides of the duality pairing."""

    mc_value: float
    reference: float
    se: float
    z: float


def duality_check(model: ModelSpec, filter_track: FilterTrack,
                  ensemble: SmoothingEnsemble, f, g,
                  s: Optional[float] = None) -> DualityReport:
    """Pair each member's s-state with its terminal state and compare the
    cross-moment E[f(X_s) g(X_t)] against the joint-Gaussian value built from
    the RTS marginals and the ensemble lag-covariance (linear-Gaussian only).
    """
    if model.linear is None:
        raise UnsupportedTestFunction("duality_check is defined in linear-Gaussian mode")
    poly_f = as_quadratic(f, model.dim_state)
    poly_g = as_quadratic(g, model.dim_state)
    grid = ensemble.grid
    i_t = ensemble.snapshot_steps[-1]
    i_s = grid.node_index(s) if s is not None else ensemble.snapshot_steps[0]
    xs = ensemble.marginal(i_s)
    xt = ensemble.marginal(i_t)
    values = poly_f(xs) * poly_g(xt)
    mc = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(values.size))

    rts = rts_smoother(filter_track, model, grid)
    m = model.dim_state
    mean = np.concatenate([rts.means[i_s], filter_track.means[i_t]])
    lag = np.atleast_2d(np.cov(np.hstack([xs, xt]), rowvar=False))[:m, m:]
    cov = np.zeros((2 * m, 2 * m))
    cov[:m, :m] = rts.covs[i_s]
    cov[m:, m:] = filter_track.covs[i_t]
    cov[:m, m:] = lag
    cov[m:, :m] = lag.T
    ref = gaussian_quadratic_product_mean(poly_f, poly_g, mean, cov)
    diff = mc - ref
    return DualityReport(mc_value=mc, reference=ref, se=se,
                         z=diff / se if se > 0 else 0.0)


def operator_consistency(model: ModelSpec, density_grid: DensityGrid, probe_fn,
                         x: float, t: float = 0.0) -> tuple[float, float]:
    """Evaluate the backward generator two ways at a probe point.

    Expanded form: (score - a) f' + alpha f'' / 2 with the tabulated score.
    Divergence form: -(a f' + alpha f'' / 2) + p^-1 d/dx(p alpha f'),
    differentiated on the grid. The two agree up to the spatial
    discretization error.
    """
    poly = as_quadratic(probe_fn, 1)
    xs = density_grid.xs
    p = density_grid.values

    def alpha_fn(xi):
        return float(np.atleast_2d(alpha_at(model, t, np.array([xi])))[0, 0])

    alpha_x = alpha_fn(x)
    a_x = float(np.asarray(model.drift(t, np.array([x])), dtype=float).reshape(()))
    fp = float(poly.gradient(np.array([x]))[0])
    fpp = float(poly.hessian()[0, 0])

    sc = grid_score(density_grid, alpha_fn, x)
    form_expanded = (sc - a_x) * fp + 0.5 * alpha_x * fpp

    alpha_nodes = np.array([alpha_fn(xi) for xi in xs])
    fp_nodes = poly.gradient(xs[:, None]).reshape(-1)
    flux = p * alpha_nodes * fp_nodes
    dflux = np.gradient(flux, xs)
    p_at = float(np.interp(x, xs, p))
    form_divergence = -(a_x * fp + 0.5 * alpha_x * fpp) + float(np.interp(x, xs, dflux)) / p_at
    return form_expanded, form_divergence
