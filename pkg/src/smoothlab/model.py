"""Signal/observation model definitions and built-in benchmark instances.

A model is the Ito pair

    dX_t = a_t(X_t) dt + sigma_t(X_t) dW_t          (signal, R^m)
    dY_t = b_t(X_t) dt + varsigma_t dV_t            (observation, R^n)

with alpha_t(x) = sigma_t sigma_t' and beta_t = varsigma_t varsigma_t'.
All coefficient callables are vectorized over a leading batch axis: drift and
sensor map (t, x[..., m]) to (..., m) and (..., n); diffusion maps to
(..., m, p) or to a shared (m, p) matrix when state-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from .errors import DegenerateObservationNoise, DimensionMismatch, UnknownBenchmark

DEFAULT_OBS_NOISE_FLOOR = 1e-8


def _as_matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    out = np.atleast_2d(np.asarray(value, dtype=float))
    if out.shape != (rows, cols):
        raise DimensionMismatch(f"{name} must have shape ({rows}, {cols}), got {out.shape}")
    return out


def _as_vector(value, size: int, name: str) -> np.ndarray:
    out = np.atleast_1d(np.asarray(value, dtype=float))
    if out.shape != (size,):
        raise DimensionMismatch(f"{name} must have shape ({size},), got {out.shape}")
    return out


@dataclass(frozen=True)
class ModelSpec:
    """Full problem definition: drift, diffusion, sensor, noises, initial law.

    Immutable after construction; safe for concurrent reads.
    """

    dim_state: int
    dim_obs: int
    dim_noise: int           # columns of sigma (p)
    dim_obs_noise: int       # columns of varsigma (q)
    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    sensor: Callable[[float, np.ndarray], np.ndarray]
    obs_noise: Callable[[float], np.ndarray]
    initial_mean: np.ndarray
    initial_cov: np.ndarray
    obs_noise_floor: float = DEFAULT_OBS_NOISE_FLOOR
    linear: "LinearGaussianSpec | None" = None
    name: str = ""

    def __post_init__(self):
        mean = _as_vector(self.initial_mean, self.dim_state, "initial_mean")
        cov = _as_matrix(self.initial_cov, self.dim_state, self.dim_state, "initial_cov")
        object.__setattr__(self, "initial_mean", mean)
        object.__setattr__(self, "initial_cov", cov)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise DimensionMismatch("initial_cov must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise DimensionMismatch("initial_cov must be positive semidefinite")
        beta = self.beta_at(0.0)
        if np.linalg.eigvalsh(beta).min() < self.obs_noise_floor:
            raise DegenerateObservationNoise(
                f"beta = varsigma varsigma' must satisfy beta >= {self.obs_noise_floor} I"
            )

    @property
    def is_linear_gaussian(self) -> bool:
        return self.linear is not None

    def beta_at(self, t: float) -> np.ndarray:
        varsigma = _as_matrix(
            self.obs_noise(t), self.dim_obs, self.dim_obs_noise, "obs_noise(t)"
        )
        return varsigma @ varsigma.T


def alpha_at(model: ModelSpec, t: float, x: np.ndarray) -> np.ndarray:
    """Diffusion covariance alpha_t(x) = sigma_t(x) sigma_t(x)'.

    Returns an (m, m) matrix for a single state, or (..., m, m) for a batch.
    """
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(model.diffusion(t, x), dtype=float)
    if sigma.ndim == 2:
        return sigma @ sigma.T
    return np.einsum("...ip,...jp->...ij", sigma, sigma)


@dataclass(frozen=True)
class LinearGaussianSpec:
    """Linear-Gaussian coefficients: a_t(x) = A_t x, b_t(x) = B_t x, sigma_t = Sigma_t."""

    A: Callable[[float], np.ndarray]
    B: Callable[[float], np.ndarray]
    Sigma: Callable[[float], np.ndarray]
    obs_noise: Callable[[float], np.ndarray]
    initial_mean: np.ndarray
    initial_cov: np.ndarray


def make_linear_gaussian(
    A,
    B,
    Sigma,
    obs_noise,
    initial_mean,
    initial_cov,
    obs_noise_floor: float = DEFAULT_OBS_NOISE_FLOOR,
    name: str = "",
) -> ModelSpec:
    """Assemble a ModelSpec whose drift/sensor are the linear maps A_t x, B_t x.

    Matrix arguments may be constants (scalars/arrays) or callables of t.
    Raises DegenerateObservationNoise when beta = varsigma varsigma' fails the
    positivity floor, DimensionMismatch on inconsistent shapes.
    """
    A0 = np.atleast_2d(np.asarray(A(0.0) if callable(A) else A, dtype=float))
    m = A0.shape[0]
    if A0.shape != (m, m):
        raise DimensionMismatch(f"A must be square, got {A0.shape}")
    B0 = np.atleast_2d(np.asarray(B(0.0) if callable(B) else B, dtype=float))
    n = B0.shape[0]
    if B0.shape[1] != m:
        raise DimensionMismatch(f"B must have {m} columns, got {B0.shape}")
    S0 = np.atleast_2d(np.asarray(Sigma(0.0) if callable(Sigma) else Sigma, dtype=float))
    if S0.shape[0] != m:
        raise DimensionMismatch(f"Sigma must have {m} rows, got {S0.shape}")
    p = S0.shape[1]
    V0 = np.atleast_2d(np.asarray(obs_noise(0.0) if callable(obs_noise) else obs_noise, dtype=float))
    if V0.shape[0] != n:
        raise DimensionMismatch(f"obs_noise must have {n} rows, got {V0.shape}")
    q = V0.shape[1]

    def _const(mat):
        arr = np.atleast_2d(np.asarray(mat, dtype=float))
        return lambda t: arr

    A_fn = A if callable(A) else _const(A)
    B_fn = B if callable(B) else _const(B)
    S_fn = Sigma if callable(Sigma) else _const(Sigma)
    V_fn = obs_noise if callable(obs_noise) else _const(obs_noise)

    lg = LinearGaussianSpec(
        A=lambda t: np.atleast_2d(np.asarray(A_fn(t), dtype=float)),
        B=lambda t: np.atleast_2d(np.asarray(B_fn(t), dtype=float)),
        Sigma=lambda t: np.atleast_2d(np.asarray(S_fn(t), dtype=float)),
        obs_noise=lambda t: np.atleast_2d(np.asarray(V_fn(t), dtype=float)),
        initial_mean=_as_vector(initial_mean, m, "initial_mean"),
        initial_cov=_as_matrix(initial_cov, m, m, "initial_cov"),
    )

    def drift(t, x):
        return np.asarray(x) @ lg.A(t).T

    def sensor(t, x):
        return np.asarray(x) @ lg.B(t).T

    def diffusion(t, x):
        return lg.Sigma(t)

    return ModelSpec(
        dim_state=m,
        dim_obs=n,
        dim_noise=p,
        dim_obs_noise=q,
        drift=drift,
        diffusion=diffusion,
        sensor=sensor,
        obs_noise=lg.obs_noise,
        initial_mean=lg.initial_mean,
        initial_cov=lg.initial_cov,
        obs_noise_floor=obs_noise_floor,
        linear=lg,
        name=name,
    )


def _make_bm() -> ModelSpec:
    # Standard Brownian motion from x0 = 0, null sensor.
    return make_linear_gaussian(
        A=0.0, B=0.0, Sigma=1.0, obs_noise=1.0,
        initial_mean=0.0, initial_cov=0.0, name="bm",
    )


def _make_ou() -> ModelSpec:
    # dX = -X dt + sqrt(2) dW, stationary law N(0, 1), null sensor.
    return make_linear_gaussian(
        A=-1.0, B=0.0, Sigma=np.sqrt(2.0), obs_noise=1.0,
        initial_mean=0.0, initial_cov=1.0, name="ou",
    )


def _make_lg1d() -> ModelSpec:
    return make_linear_gaussian(
        A=0.0, B=1.0, Sigma=1.0, obs_noise=1.0,
        initial_mean=0.0, initial_cov=1.0, name="lg1d",
    )


def _make_lg2d() -> ModelSpec:
    # Rotation drift, scalar observation of the first coordinate.
    return make_linear_gaussian(
        A=np.array([[0.0, 1.0], [-1.0, 0.0]]),
        B=np.array([[1.0, 0.0]]),
        Sigma=np.eye(2),
        obs_noise=1.0,
        initial_mean=np.zeros(2),
        initial_cov=np.eye(2),
        name="lg2d",
    )


def _make_sine1d() -> ModelSpec:
    return ModelSpec(
        dim_state=1,
        dim_obs=1,
        dim_noise=1,
        dim_obs_noise=1,
        drift=lambda t, x: np.sin(np.asarray(x, dtype=float)),
        diffusion=lambda t, x: np.ones((1, 1)),
        sensor=lambda t, x: np.asarray(x, dtype=float),
        obs_noise=lambda t: np.ones((1, 1)),
        initial_mean=np.zeros(1),
        initial_cov=np.eye(1),
        name="sine1d",
    )


_FACTORIES: Dict[str, Callable[[], ModelSpec]] = {
    "bm": _make_bm,
    "ou": _make_ou,
    "lg1d": _make_lg1d,
    "lg2d": _make_lg2d,
    "sine1d": _make_sine1d,
}


class BenchmarkCatalog(dict):
    """Name -> ModelSpec mapping raising UnknownBenchmark on missing keys."""

    def __missing__(self, key):
        raise UnknownBenchmark(f"unknown benchmark {key!r}; known: {sorted(_FACTORIES)}")


def builtin_benchmarks() -> BenchmarkCatalog:
    """Catalog of the named desk-scale benchmark models."""
    return BenchmarkCatalog({name: make() for name, make in _FACTORIES.items()})


def benchmark(name: str) -> ModelSpec:
    """Look up one built-in benchmark by name."""
    return builtin_benchmarks()[name]
