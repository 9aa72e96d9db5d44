"""Time grids, counter-based noise streams, and Euler-Maruyama stepping.

Forward simulation realizes the signal/observation pair; the single backward
step advances the smoothing diffusion from time u to u - h given the score
p_u^{-1} div_alpha(p_u) evaluated at the current state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, GridMismatch, NonFiniteState
from .model import ModelSpec

# Stream ids keep every consumer of randomness on a disjoint Philox key.
STREAM_INIT = 0
STREAM_SIGNAL = 1
STREAM_OBS = 2
STREAM_BACKWARD = 3
STREAM_TERMINAL = 4
STREAM_RESAMPLE = 5


@dataclass(frozen=True)
class TimeGrid:
    """Uniform mesh t_start = u_0 < ... < u_n = t_end with step h."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.t_end <= self.t_start:
            raise ValueError("t_end must exceed t_start")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def h(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t_start + self.h * np.arange(self.n_steps + 1)

    def node_index(self, t: float, atol: float = 1e-9) -> int:
        """Index of the grid node at time t; raises GridMismatch if off-grid."""
        i = int(round((t - self.t_start) / self.h))
        if i < 0 or i > self.n_steps or abs(self.t_start + i * self.h - t) > atol:
            raise GridMismatch(f"time {t} is not a node of {self}")
        return i


@dataclass(frozen=True)
class NoiseStream:
    """Deterministic counter-based N(0,1) source keyed by (seed, stream, step).

    Backed by Philox: the draw block for a given step is a pure function of
    the key, independent of call order and of any threading, so ensemble code
    can consume noise in any schedule and stay bitwise reproducible.
    """

    seed: int
    stream: int = 0

    def normals(self, step: int, n_paths: int, dim: int) -> np.ndarray:
        bitgen = np.random.Philox(
            key=[self.seed & 0xFFFFFFFFFFFFFFFF, self.stream],
            counter=[0, 0, step, 0],
        )
        return np.random.Generator(bitgen).standard_normal((n_paths, dim))

    def uniform(self, step: int) -> float:
        bitgen = np.random.Philox(
            key=[self.seed & 0xFFFFFFFFFFFFFFFF, self.stream],
            counter=[0, 0, step, 1],
        )
        return float(np.random.Generator(bitgen).random())

    def uniforms(self, step: int, n: int) -> np.ndarray:
        bitgen = np.random.Philox(
            key=[self.seed & 0xFFFFFFFFFFFFFFFF, self.stream],
            counter=[0, 0, step, 2],
        )
        return np.random.Generator(bitgen).random(n)


def brownian_increments(stream: NoiseStream, step: int, n_paths: int, dim: int) -> np.ndarray:
    """Unit-variance normal draws for one step; scale by sqrt(h) at use site."""
    return stream.normals(step, n_paths, dim)


@dataclass
class PathBundle:
    """Jointly simulated signal paths plus one observation path.

    signal has shape (n_paths, n_steps + 1, m); the observation is driven by
    signal path 0 (the "true" trajectory). obs_path is cumulative with Y_0 = 0.
    """

    grid: TimeGrid
    signal: np.ndarray
    obs_increments: np.ndarray
    obs_path: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.obs_path is None:
            self.obs_path = np.vstack(
                [np.zeros((1, self.obs_increments.shape[1])),
                 np.cumsum(self.obs_increments, axis=0)]
            )


def apply_matrix(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Apply an (m, p) or batched (..., m, p) matrix to (..., p) vectors."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim == 2:
        return vec @ mat.T
    return np.einsum("...ij,...j->...i", mat, vec)


def _check_finite(x: np.ndarray, context: str):
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(f"non-finite state encountered during {context}")


def sample_initial(model: ModelSpec, n_paths: int, stream: NoiseStream) -> np.ndarray:
    """Draw n_paths states from the Gaussian initial law of the model."""
    z = stream.normals(0, n_paths, model.dim_state)
    w, v = np.linalg.eigh(model.initial_cov)
    root = v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return model.initial_mean + z @ root.T


def simulate_forward(model: ModelSpec, grid: TimeGrid, seed: int, n_paths: int) -> PathBundle:
    """Euler-Maruyama simulation of the signal/observation pair on the grid.

    X_{i+1} = X_i + a(u_i, X_i) h + sigma(u_i, X_i) sqrt(h) xi_i, and the
    observation increments DY_i = b(u_i, X_i^{(0)}) h + varsigma(u_i) sqrt(h) eta_i
    follow signal path 0.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    h = grid.h
    sqrt_h = np.sqrt(h)
    m, n = model.dim_state, model.dim_obs
    init_stream = NoiseStream(seed, STREAM_INIT)
    sig_stream = NoiseStream(seed, STREAM_SIGNAL)
    obs_stream = NoiseStream(seed, STREAM_OBS)

    signal = np.empty((n_paths, grid.n_steps + 1, m))
    signal[:, 0] = sample_initial(model, n_paths, init_stream)
    obs_increments = np.empty((grid.n_steps, n))

    x = signal[:, 0].copy()
    nodes = grid.nodes
    for i in range(grid.n_steps):
        u = nodes[i]
        xi = sig_stream.normals(i, n_paths, model.dim_noise)
        eta = obs_stream.normals(i, 1, model.dim_obs_noise)[0]
        b_true = np.atleast_1d(np.asarray(model.sensor(u, x[0]), dtype=float)).reshape(n)
        varsigma = np.asarray(model.obs_noise(u), dtype=float)
        obs_increments[i] = b_true * h + varsigma @ eta * sqrt_h
        x = x + np.asarray(model.drift(u, x), dtype=float) * h \
            + apply_matrix(model.diffusion(u, x), xi) * sqrt_h
        _check_finite(x, f"forward simulation at step {i}")
        signal[:, i + 1] = x
    return PathBundle(grid=grid, signal=signal, obs_increments=obs_increments)


def backward_step(
    x: np.ndarray,
    u: float,
    h: float,
    model: ModelSpec,
    score: np.ndarray,
    noise: np.ndarray,
) -> np.ndarray:
    """One Euler slice of the backward smoothing diffusion: state at u - h.

    Returns x + (score - a_u(x)) h + sigma_u(x) sqrt(h) noise, where score is
    the evaluated drift correction p_u^{-1} div_alpha(p_u)(x).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    drift = np.asarray(model.drift(u, x), dtype=float)
    out = x + (np.asarray(score, dtype=float) - drift) * h \
        + apply_matrix(model.diffusion(u, x), np.asarray(noise, dtype=float)) * np.sqrt(h)
    _check_finite(out, f"backward step at u={u}")
    return out


def export_signal_csv(bundle: PathBundle, path: str):
    """Write signal paths as rows (step, time, path_id, x_1..x_m)."""
    nodes = bundle.grid.nodes
    n_paths, _, m = bundle.signal.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "time", "path_id"] + [f"x_{j+1}" for j in range(m)])
        for i, t in enumerate(nodes):
            for p in range(n_paths):
                writer.writerow([i, repr(float(t)), p] + [repr(float(v)) for v in bundle.signal[p, i]])


def export_observation_csv(bundle: PathBundle, path: str):
    """Write observation increments as rows (step, time, dy_1..dy_n)."""
    nodes = bundle.grid.nodes
    n = bundle.obs_increments.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "time"] + [f"dy_{j+1}" for j in range(n)])
        for i in range(bundle.grid.n_steps):
            writer.writerow([i, repr(float(nodes[i]))] + [repr(float(v)) for v in bundle.obs_increments[i]])


def load_observation_csv(path: str) -> np.ndarray:
    """Read observation increments written by export_observation_csv."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = len(header) - 2
        rows = [[float(v) for v in row[2:]] for row in reader]
    out = np.asarray(rows, dtype=float)
    if out.ndim != 2 or out.shape[1] != n:
        raise DimensionMismatch("malformed observation CSV")
    return out
