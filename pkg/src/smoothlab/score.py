"""Backward drift correction p^-1 div_alpha(p): the score field.

Three interchangeable evaluation routes back the smoothing diffusion:
exact linear-Gaussian (from a Kalman track), moment-matched Gaussian fits of
particle clouds, Gaussian-kernel density estimates, and 1D tabulated
densities differentiated on their grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    EmptyCloud,
    NonConstantAlpha,
    OutOfSupport,
    SingularCovariance,
)
from .filtering import FilterTrack, GaussianBelief, ParticleCloud
from .model import ModelSpec, alpha_at

DEFAULT_SCORE_CLIP = 1e3
DEFAULT_P_FLOOR = 1e-12
_COND_GUARD = 1e12


def clip_norm(vec: np.ndarray, cap: float) -> np.ndarray:
    """Scale rows of vec down to Euclidean norm cap where they exceed it."""
    vec = np.asarray(vec, dtype=float)
    norm = np.linalg.norm(np.atleast_2d(vec), axis=-1, keepdims=True)
    factor = np.where(norm > cap, cap / np.maximum(norm, 1e-300), 1.0)
    return (np.atleast_2d(vec) * factor).reshape(vec.shape)


def linear_gaussian_score(belief: GaussianBelief, alpha: np.ndarray,
                          x: np.ndarray) -> np.ndarray:
    """Exact Gaussian score p^-1 div_alpha(p)(x) = -alpha R^-1 (x - mean)."""
    cov = np.atleast_2d(np.asarray(belief.cov, dtype=float))
    if np.linalg.cond(cov) > _COND_GUARD:
        raise SingularCovariance("belief covariance is numerically singular")
    M = np.atleast_2d(np.asarray(alpha, dtype=float)) @ np.linalg.inv(cov)
    x = np.asarray(x, dtype=float)
    return -(x - np.atleast_1d(belief.mean)) @ M.T


def gaussian_fit_score(cloud: ParticleCloud, alpha: np.ndarray,
                       x: np.ndarray) -> np.ndarray:
    """Score of the moment-matched Gaussian surrogate of a particle cloud."""
    if cloud.n_particles == 0:
        raise EmptyCloud("cannot fit moments of an empty cloud")
    if cloud.ess < 2.0:
        raise EmptyCloud(f"cloud ESS {cloud.ess:.2f} < 2")
    mean, cov = cloud.mean_cov()
    cond = np.linalg.cond(np.atleast_2d(cov))
    if not np.isfinite(cond) or cond > _COND_GUARD:
        raise SingularCovariance("fitted cloud covariance is numerically singular")
    return linear_gaussian_score(GaussianBelief(mean, cov), alpha, x)


def kde_score(cloud: ParticleCloud, bandwidth: float, alpha: np.ndarray,
              x: np.ndarray, score_clip: float = DEFAULT_SCORE_CLIP) -> np.ndarray:
    """Score of the Gaussian-mixture KDE, alpha grad log p_hat, via log-sum-exp.

    Exact for the mixture sum_i w_i N(x_i, bandwidth^2 I) when alpha is
    state-independent; the caller guards that restriction.
    """
    if cloud.n_particles == 0:
        raise EmptyCloud("cannot evaluate KDE of an empty cloud")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    positions = np.atleast_2d(cloud.positions)
    w = cloud.weights
    x = np.asarray(x, dtype=float)
    xb = np.atleast_2d(x)
    # log kernel weights per (query, particle)
    diff = positions[None, :, :] - xb[:, None, :]
    log_k = np.log(np.maximum(w, 1e-300))[None, :] \
        - 0.5 * np.sum(diff * diff, axis=-1) / bandwidth**2
    peak = log_k.max(axis=1, keepdims=True)
    resp = np.exp(log_k - peak)
    resp /= resp.sum(axis=1, keepdims=True)
    grad_log = np.einsum("qi,qij->qj", resp, diff) / bandwidth**2
    score = grad_log @ np.atleast_2d(np.asarray(alpha, dtype=float)).T
    score = clip_norm(score, score_clip)
    return score.reshape(x.shape) if x.ndim == 1 else score


def silverman_bandwidth(cloud: ParticleCloud) -> float:
    """Silverman's rule on weighted samples, ESS as the effective count."""
    _, cov = cloud.mean_cov()
    sigma = float(np.sqrt(np.mean(np.diag(np.atleast_2d(cov)))))
    dim = cloud.positions.shape[1]
    n_eff = max(cloud.ess, 2.0)
    return 1.06 * sigma * n_eff ** (-1.0 / (4 + dim))


def require_constant_alpha(model: ModelSpec, t: float, probes: int = 8,
                           seed: int = 0) -> np.ndarray:
    """Return alpha_t, raising NonConstantAlpha if it varies with the state."""
    rng = np.random.default_rng(seed)
    x0 = np.zeros(model.dim_state)
    ref = alpha_at(model, t, x0)
    for _ in range(probes):
        x = rng.normal(size=model.dim_state) * 3.0
        if not np.allclose(alpha_at(model, t, x), ref, atol=1e-10):
            raise NonConstantAlpha(
                "kde score supports only state-independent diffusion; use grid_score"
            )
    return ref


def alpha_axis_1d(model: ModelSpec, t: float, xs: np.ndarray) -> np.ndarray:
    """alpha_t(x) along a 1D spatial axis, shape (len(xs),)."""
    full = alpha_at(model, t, np.asarray(xs, dtype=float)[:, None])
    full = np.asarray(full)
    if full.ndim == 2:  # state-independent diffusion
        return np.full(len(xs), float(full[0, 0]))
    return full[:, 0, 0]


def grid_score_table(values: np.ndarray, xs: np.ndarray,
                     alpha_of_x: np.ndarray, p_floor_rel: float = DEFAULT_P_FLOOR,
                     score_clip: float = DEFAULT_SCORE_CLIP) -> tuple[np.ndarray, np.ndarray]:
    """Per-node score d/dx(alpha p)/p with a relative density floor.

    Returns (score values on nodes, boolean support mask). Outside the mask
    the score is held at the nearest supported value, clipped.
    """
    p = np.asarray(values, dtype=float)
    g = np.gradient(np.asarray(alpha_of_x, dtype=float) * p, xs)
    support = p >= p_floor_rel * p.max()
    safe_p = np.where(support, p, np.nan)
    score = g / safe_p
    if support.any():
        idx = np.arange(p.size)
        filled = np.interp(idx, idx[support], score[support])
        score = np.where(support, score, filled)
    score = np.clip(score, -score_clip, score_clip)
    return score, support


def grid_score(density_grid, alpha_fn: Callable[[float], float], x: float,
               p_floor_rel: float = DEFAULT_P_FLOOR,
               score_clip: float = DEFAULT_SCORE_CLIP) -> float:
    """1D tabulated score at x: central-difference d/dx(alpha p) over p.

    Linear interpolation between nodes; raises OutOfSupport when x lies
    outside the grid or where p(x) falls under the relative density floor.
    """
    xs = density_grid.xs
    p = density_grid.values
    if x < xs[0] or x > xs[-1]:
        raise OutOfSupport(f"x={x} outside grid [{xs[0]}, {xs[-1]}]")
    p_at = float(np.interp(x, xs, p))
    if p_at < p_floor_rel * p.max():
        raise OutOfSupport(f"density below floor at x={x}")
    alpha_nodes = np.asarray([float(alpha_fn(xi)) for xi in xs])
    score, _ = grid_score_table(p, xs, alpha_nodes, p_floor_rel, score_clip)
    return float(np.interp(x, xs, score))


# ---------------------------------------------------------------------------
# Score sources: per-node callables consumed by the backward smoothing flow.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExactLGScoreSource:
    """Exact per-node Gaussian score from a Kalman-Bucy track."""

    track: FilterTrack
    model: ModelSpec
    score_clip: float = DEFAULT_SCORE_CLIP

    kind = "exact_lg"

    def __call__(self, step: int, t: float, x: np.ndarray) -> np.ndarray:
        alpha = alpha_at(self.model, t, self.track.means[step])
        score = linear_gaussian_score(self.track.belief(step), alpha, x)
        return clip_norm(score, self.score_clip)


@dataclass(frozen=True)
class GaussianScoreSource:
    """Fixed Gaussian score, e.g. the stationary law of a reversible signal."""

    mean: np.ndarray
    cov: np.ndarray
    alpha: np.ndarray
    score_clip: float = DEFAULT_SCORE_CLIP

    kind = "gaussian"

    def __call__(self, step: int, t: float, x: np.ndarray) -> np.ndarray:
        belief = GaussianBelief(np.atleast_1d(self.mean), np.atleast_2d(self.cov))
        return clip_norm(linear_gaussian_score(belief, self.alpha, x), self.score_clip)


@dataclass(frozen=True)
class GaussianFitScoreSource:
    """Moment-matched Gaussian score from stored particle clouds."""

    track: FilterTrack
    model: ModelSpec
    score_clip: float = DEFAULT_SCORE_CLIP

    kind = "gaussian_fit"

    def __call__(self, step: int, t: float, x: np.ndarray) -> np.ndarray:
        alpha = alpha_at(self.model, t, self.track.means[step])
        belief = self.track.belief(step)
        if np.linalg.cond(np.atleast_2d(belief.cov)) > _COND_GUARD:
            raise SingularCovariance(f"cloud covariance singular at node {step}")
        return clip_norm(linear_gaussian_score(belief, alpha, x), self.score_clip)


class KdeScoreSource:
    """Kernel score from stored particle clouds (constant-alpha models only)."""

    kind = "kde"

    def __init__(self, track: FilterTrack, model: ModelSpec,
                 bandwidth: float | None = None,
                 score_clip: float = DEFAULT_SCORE_CLIP):
        if track.positions is None:
            raise ValueError("kde score needs a track with stored particle history")
        self.track = track
        self.model = model
        self.bandwidth = bandwidth
        self.score_clip = score_clip
        self.alpha = require_constant_alpha(model, track.grid.t_start)

    def __call__(self, step: int, t: float, x: np.ndarray) -> np.ndarray:
        cloud = self.track.cloud(step)
        bw = self.bandwidth if self.bandwidth is not None else silverman_bandwidth(cloud)
        return kde_score(cloud, bw, self.alpha, x, self.score_clip)


class GridScoreSource:
    """Interpolated per-node score tables from a 1D density sequence.

    Queries are clamped into the supported interval of each node's table,
    mirroring the clip that stands in for the paper-regime density bounds.
    """

    kind = "grid"

    def __init__(self, densities, grid: TimeGrid, model: ModelSpec,
                 p_floor_rel: float = DEFAULT_P_FLOOR,
                 score_clip: float = DEFAULT_SCORE_CLIP):
        if len(densities) != grid.n_steps + 1:
            raise ValueError("need one density per grid node")
        self.grid = grid
        self.xs = densities[0].xs
        nodes = grid.nodes
        self.tables = []
        for step, dens in enumerate(densities):
            alpha_axis = alpha_axis_1d(model, nodes[step], self.xs)
            table, support = grid_score_table(
                dens.values, self.xs, alpha_axis, p_floor_rel, score_clip
            )
            self.tables.append((table, support))

    def __call__(self, step: int, t: float, x: np.ndarray) -> np.ndarray:
        table, _ = self.tables[step]
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1)
        out = np.interp(flat, self.xs, table)
        return out.reshape(x.shape)
