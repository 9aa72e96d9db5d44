"""1D grid solvers: forward Fokker-Planck, Zakai filter, backward smoothing.

These are the independent desk-scale oracles. All three share one explicit
conservative finite-volume stepper (central fluxes, zero-flux boundaries)
with automatic sub-stepping against the diffusion and advection CFL limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from .errors import (
    CflViolation,
    DimensionMismatch,
    GridMismatch,
    MassUnderflow,
    NegativeDensity,
)
from .model import ModelSpec, alpha_at
from .score import DEFAULT_P_FLOOR, DEFAULT_SCORE_CLIP, alpha_axis_1d, grid_score_table
from .sde import TimeGrid

DEFAULT_MAX_SUBSTEPS = 500_000


@dataclass
class DensityGrid:
    """1D tabulated density on the uniform node mesh of [x_min, x_max]."""

    x_min: float
    x_max: float
    n_cells: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.n_cells + 1,):
            raise DimensionMismatch(
                f"values must have {self.n_cells + 1} nodes, got {self.values.shape}"
            )

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def xs(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_cells + 1)

    def mass(self) -> float:
        return float(np.trapezoid(self.values, dx=self.dx))

    def normalized(self) -> "DensityGrid":
        m = self.mass()
        if m <= 0:
            raise MassUnderflow("density mass underflowed to zero")
        return DensityGrid(self.x_min, self.x_max, self.n_cells, self.values / m)

    def moments(self) -> tuple[float, float]:
        """Trapezoid mean and variance of the tabulated density."""
        xs = self.xs
        m0 = self.mass()
        m1 = float(np.trapezoid(xs * self.values, dx=self.dx)) / m0
        m2 = float(np.trapezoid((xs - m1) ** 2 * self.values, dx=self.dx)) / m0
        return m1, m2

    def copy_with(self, values: np.ndarray) -> "DensityGrid":
        return DensityGrid(self.x_min, self.x_max, self.n_cells, values)


def gaussian_density_grid(mean: float, var: float, x_min: float, x_max: float,
                          n_cells: int) -> DensityGrid:
    out = DensityGrid(x_min, x_max, n_cells, np.zeros(n_cells + 1))
    xs = out.xs
    out.values = np.exp(-0.5 * (xs - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
    return out.normalized()


def default_domain(mean: float, var: float, half_sigmas: float = 8.0) -> tuple[float, float]:
    """8-sigma box keeping Gaussian truncation far below the mass tolerance."""
    half = half_sigmas * math.sqrt(max(var, 1e-12))
    return mean - half, mean + half


def _substeps(h: float, dx: float, max_D: float, max_mu: float,
              max_substeps: int) -> int:
    dt_limit = min(
        0.5 * dx * dx / max(max_D, 1e-300),
        0.5 * dx / max(max_mu, 1e-300),
        h,
    )
    n_sub = max(1, math.ceil(h / dt_limit))
    if n_sub > max_substeps:
        raise CflViolation(n_sub, max_substeps)
    return n_sub


def _fv_step(p: np.ndarray, dx: float, dt: float, mu_mid: np.ndarray,
             D_nodes: np.ndarray) -> np.ndarray:
    """One explicit step of dp/dt = -d/dx(mu p) + (1/2) d^2/dx^2(D p).

    Central flux F_{k+1/2} = mu (p_k + p_{k+1})/2 - (D p)' / 2 at midpoints,
    zero flux through both boundaries; conserves the node sum exactly.
    """
    Dp = D_nodes * p
    flux = mu_mid * 0.5 * (p[:-1] + p[1:]) - 0.5 * (Dp[1:] - Dp[:-1]) / dx
    div = np.empty_like(p)
    div[0] = flux[0] / dx
    div[1:-1] = (flux[1:] - flux[:-1]) / dx
    div[-1] = -flux[-1] / dx
    return p - dt * div


def _check_negativity(p: np.ndarray) -> np.ndarray:
    floor = -1e-10 * max(1.0, float(p.max(initial=0.0)))
    if p.min() < floor:
        raise NegativeDensity(f"density reached {p.min():.3e}, below clamp tolerance")
    return np.clip(p, 0.0, None)


def _advance(p: np.ndarray, dx: float, h: float, mu_mid: np.ndarray,
             D_nodes: np.ndarray, max_substeps: int) -> np.ndarray:
    n_sub = _substeps(h, dx, float(D_nodes.max()), float(np.abs(mu_mid).max()),
                      max_substeps)
    dt = h / n_sub
    for _ in range(n_sub):
        p = _fv_step(p, dx, dt, mu_mid, D_nodes)
    return _check_negativity(p)


def _coefficients(model: ModelSpec, t: float, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drift at cell midpoints and diffusion covariance at nodes."""
    x_mid = 0.5 * (xs[:-1] + xs[1:])
    mu_mid = np.asarray(model.drift(t, x_mid[:, None]), dtype=float).reshape(-1)
    D_nodes = alpha_axis_1d(model, t, xs)
    return mu_mid, D_nodes


def solve_fokker_planck_1d(model: ModelSpec, initial_density: DensityGrid,
                           grid: TimeGrid,
                           max_substeps: int = DEFAULT_MAX_SUBSTEPS) -> List[DensityGrid]:
    """Forward Kolmogorov evolution of the signal density (null-sensor oracle).

    Returns one normalized DensityGrid per time node; raises if the raw mass
    drifts by more than 1e-6 before any renormalization.
    """
    if model.dim_state != 1:
        raise DimensionMismatch("PDE oracles are 1D only")
    dens = initial_density.normalized()
    out = [dens]
    p = dens.values.copy()
    nodes = grid.nodes
    for i in range(grid.n_steps):
        mu_mid, D_nodes = _coefficients(model, nodes[i], dens.xs)
        p = _advance(p, dens.dx, grid.h, mu_mid, D_nodes, max_substeps)
        raw = dens.copy_with(p)
        if abs(raw.mass() - 1.0) > 1e-6:
            raise MassUnderflow(
                f"mass drifted to {raw.mass():.9f} at step {i} (conservation bug)"
            )
        normalized = raw.normalized()
        p = normalized.values
        out.append(normalized)
    return out


@dataclass
class DensityTrack:
    """Grid-filter output usable wherever a FilterTrack feeds the smoother."""

    grid: TimeGrid
    densities: List[DensityGrid]
    log_normalizer: np.ndarray
    mode: str = field(default="grid", init=False)

    def density(self, step: int) -> DensityGrid:
        return self.densities[step]


def solve_zakai_1d(model: ModelSpec, obs_increments: np.ndarray,
                   initial_density: DensityGrid, grid: TimeGrid,
                   max_substeps: int = DEFAULT_MAX_SUBSTEPS) -> DensityTrack:
    """Grid filter: Fokker-Planck transport plus multiplicative reweighting.

    Each step evolves the density with the signal generator, multiplies
    pointwise by exp(b beta^-1 dY - b beta^-1 b h / 2) (robust exponential
    form of the observation update), renormalizes, and accumulates the
    log-normalizer.
    """
    if model.dim_state != 1 or model.dim_obs != 1:
        raise DimensionMismatch("solve_zakai_1d handles scalar signal/observation")
    obs_increments = np.asarray(obs_increments, dtype=float).reshape(grid.n_steps, -1)
    dens = initial_density.normalized()
    xs = dens.xs
    p = dens.values.copy()
    out = [dens]
    log_norm = np.zeros(grid.n_steps + 1)
    nodes = grid.nodes
    for i in range(grid.n_steps):
        u = nodes[i]
        mu_mid, D_nodes = _coefficients(model, u, xs)
        p = _advance(p, dens.dx, grid.h, mu_mid, D_nodes, max_substeps)
        b = np.asarray(model.sensor(u, xs[:, None]), dtype=float).reshape(-1)
        beta = float(model.beta_at(u)[0, 0])
        log_w = b / beta * float(obs_increments[i, 0]) - 0.5 * b * b / beta * grid.h
        p = p * np.exp(log_w)
        raw = dens.copy_with(p)
        mass = raw.mass()
        if mass <= 0 or not np.isfinite(mass):
            raise MassUnderflow(f"Zakai normalizer underflowed at step {i}")
        log_norm[i + 1] = log_norm[i] + np.log(mass)
        normalized = raw.normalized()
        p = normalized.values
        out.append(normalized)
    return DensityTrack(grid=grid, densities=out, log_normalizer=log_norm)


@dataclass
class BackwardDensityResult:
    """Backward smoothing marginals plus the masked-mass diagnostic."""

    densities: List[DensityGrid]
    masked_fraction: np.ndarray  # per node, mass removed by the support mask


def solve_backward_smoothing_density_1d(
    model: ModelSpec,
    filter_densities: Sequence[DensityGrid],
    grid: TimeGrid,
    terminal_density: DensityGrid | None = None,
    p_floor_rel: float = DEFAULT_P_FLOOR,
    score_clip: float = DEFAULT_SCORE_CLIP,
    max_substeps: int = DEFAULT_MAX_SUBSTEPS,
) -> BackwardDensityResult:
    """Deterministic backward transport of the smoothing marginals.

    In time-to-go the smoothing density obeys a Fokker-Planck equation with
    drift (p_s^-1 d/dx(alpha p_s) - a_s) and diffusion alpha, assembled from
    the filter densities via the tabulated score. Cells where the filter
    density sits under the relative floor are masked and the removed mass
    fraction recorded per node.
    """
    if len(filter_densities) != grid.n_steps + 1:
        raise GridMismatch("need one filter density per grid node")
    terminal = (terminal_density if terminal_density is not None
                else filter_densities[-1]).normalized()
    xs = terminal.xs
    if not np.allclose(xs, filter_densities[0].xs):
        raise GridMismatch("terminal and filter densities live on different meshes")
    nodes = grid.nodes
    out: List[DensityGrid] = [None] * (grid.n_steps + 1)
    masked = np.zeros(grid.n_steps + 1)
    out[grid.n_steps] = terminal
    q = terminal.values.copy()
    for i in range(grid.n_steps, 0, -1):
        u = nodes[i]
        alpha_axis = alpha_axis_1d(model, u, xs)
        score, support = grid_score_table(
            filter_densities[i].values, xs, alpha_axis, p_floor_rel, score_clip
        )
        a_mid = np.asarray(
            model.drift(u, (0.5 * (xs[:-1] + xs[1:]))[:, None]), dtype=float
        ).reshape(-1)
        score_mid = 0.5 * (score[:-1] + score[1:])
        mu_mid = score_mid - a_mid
        q = _advance(q, terminal.dx, grid.h, mu_mid, alpha_axis, max_substeps)
        lost = q[~support].sum() * terminal.dx
        if lost > 0:
            q = np.where(support, q, 0.0)
        total = terminal.copy_with(q).mass()
        if total <= 0:
            raise MassUnderflow(f"backward density mass underflowed at node {i - 1}")
        masked[i - 1] = lost / (lost + total)
        q = q / total
        out[i - 1] = terminal.copy_with(q.copy())
    return BackwardDensityResult(densities=out, masked_fraction=masked)


def sample_from_density(dens: DensityGrid, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws from a tabulated density (linear CDF interpolation)."""
    xs = dens.xs
    pdf = np.clip(dens.values, 0.0, None)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * dens.dx)])
    cdf /= cdf[-1]
    return np.interp(uniforms, cdf, xs)
