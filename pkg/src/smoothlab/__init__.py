"""smoothlab: backward smoothing-diffusion ensembles with analytic and PDE oracles.

A continuous-time filtering/smoothing laboratory: forward SDE simulation,
Kalman-Bucy and bootstrap particle filters, exact/fitted/kernel/grid score
fields, the backward smoothing diffusion ensemble sampler, RTS and 1D
grid-PDE reference solutions, and an experiment harness that cross-checks
them statistically.
"""

__version__ = "0.1.0"

from .errors import SmoothlabError
from .model import ModelSpec, benchmark, builtin_benchmarks, make_linear_gaussian
from .sde import NoiseStream, PathBundle, TimeGrid, simulate_forward
from .filtering import FilterTrack, kalman_bucy_solve, ks_residual, particle_filter
from .score import (
    ExactLGScoreSource,
    GaussianFitScoreSource,
    GaussianScoreSource,
    GridScoreSource,
    KdeScoreSource,
)
from .pde import (
    DensityGrid,
    DensityTrack,
    solve_backward_smoothing_density_1d,
    solve_fokker_planck_1d,
    solve_zakai_1d,
)
from .smoothing import (
    SmoothingEnsemble,
    backward_smoothing_flow,
    duality_check,
    rts_smoother,
    semigroup_check,
    time_reversal_drift,
)
from .harness import (
    ComparisonReport,
    ExperimentConfig,
    compare_densities,
    compare_moments,
    load_config,
    run_experiment,
)

__all__ = [
    "__version__",
    "SmoothlabError",
    "ModelSpec", "benchmark", "builtin_benchmarks", "make_linear_gaussian",
    "NoiseStream", "PathBundle", "TimeGrid", "simulate_forward",
    "FilterTrack", "kalman_bucy_solve", "ks_residual", "particle_filter",
    "ExactLGScoreSource", "GaussianFitScoreSource", "GaussianScoreSource",
    "GridScoreSource", "KdeScoreSource",
    "DensityGrid", "DensityTrack", "solve_backward_smoothing_density_1d",
    "solve_fokker_planck_1d", "solve_zakai_1d",
    "SmoothingEnsemble", "backward_smoothing_flow", "duality_check",
    "rts_smoother", "semigroup_check", "time_reversal_drift",
    "ComparisonReport", "ExperimentConfig", "compare_densities",
    "compare_moments", "load_config", "run_experiment",
]
