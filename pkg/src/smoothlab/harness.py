"""Experiment orchestration: config parsing, pipeline wiring, comparisons.

A config names a model, grid, filter mode, score source, ensemble size, and
a comparison reference; run_experiment wires simulate -> filter -> score ->
smooth -> compare and emits a machine-readable report whose body is a pure
function of (config, seed).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError, GridMismatch, TooFewSamples
from .filtering import FilterTrack, kalman_bucy_solve, particle_filter
from .model import ModelSpec, alpha_at, builtin_benchmarks, make_linear_gaussian
from .pde import (
    DensityGrid,
    DensityTrack,
    default_domain,
    gaussian_density_grid,
    solve_backward_smoothing_density_1d,
    solve_zakai_1d,
)
from .score import (
    DEFAULT_SCORE_CLIP,
    ExactLGScoreSource,
    GaussianFitScoreSource,
    GaussianScoreSource,
    GridScoreSource,
    KdeScoreSource,
    silverman_bandwidth,
)
from .filtering import ParticleCloud
from .smoothing import backward_smoothing_flow, rts_smoother
from .sde import TimeGrid, simulate_forward

DEFAULT_Z_THRESHOLD = 3.0
DEFAULT_L1_THRESHOLD = 0.05


def worker_cap() -> int:
    """Worker/chunk cap from SMOOTHLAB_THREADS; never affects numerics."""
    try:
        return max(1, int(os.environ.get("SMOOTHLAB_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Statistical comparison primitives
# ---------------------------------------------------------------------------

def jackknife_cov_se(samples: np.ndarray) -> np.ndarray:
    """Delete-one jackknife standard errors for every sample-covariance entry.

    Uses the closed-form leave-one-out update, so the cost is one pass over
    the centered outer products.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n = x.shape[0]
    if n < 4:
        raise TooFewSamples("jackknife needs at least 4 samples")
    d = x - x.mean(axis=0)
    prods = np.einsum("ki,kj->kij", d, d)
    centered = prods - prods.mean(axis=0)
    ssq = np.einsum("kij,kij->ij", centered, centered)
    return np.sqrt(n / ((n - 1.0) * (n - 2.0) ** 2) * ssq)


def compare_moments(samples: np.ndarray, reference_mean, reference_cov,
                    z_threshold: float = DEFAULT_Z_THRESHOLD,
                    label: str = "") -> list[dict]:
    """Per-statistic z-score rows for sample mean and covariance entries.

    Mean SEs use plug-in asymptotics; covariance SEs the delete-one
    jackknife. Each row carries (statistic, estimate, reference, se, z, pass).
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] < 30:
        raise TooFewSamples(f"need >= 30 samples, got {x.shape[0]}")
    m = x.shape[1]
    ref_mean = np.atleast_1d(np.asarray(reference_mean, dtype=float))
    ref_cov = np.atleast_2d(np.asarray(reference_cov, dtype=float))
    rows = []
    mean = x.mean(axis=0)
    se_mean = x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
    cov = np.cov(x, rowvar=False).reshape(m, m)
    se_cov = jackknife_cov_se(x)
    for j in range(m):
        z = (mean[j] - ref_mean[j]) / se_mean[j] if se_mean[j] > 0 else 0.0
        rows.append({
            "statistic": f"{label}mean_{j + 1}", "estimate": float(mean[j]),
            "reference": float(ref_mean[j]), "se": float(se_mean[j]),
            "z": float(z), "pass": bool(abs(z) <= z_threshold),
        })
    for i in range(m):
        for j in range(i, m):
            se = se_cov[i, j]
            z = (cov[i, j] - ref_cov[i, j]) / se if se > 0 else 0.0
            rows.append({
                "statistic": f"{label}cov_{i + 1}{j + 1}", "estimate": float(cov[i, j]),
                "reference": float(ref_cov[i, j]), "se": float(se),
                "z": float(z), "pass": bool(abs(z) <= z_threshold),
            })
    return rows


def compare_densities(grid_a: DensityGrid, grid_b: DensityGrid) -> float:
    """Trapezoid L1 distance between two densities on identical meshes."""
    if (grid_a.n_cells != grid_b.n_cells
            or abs(grid_a.x_min - grid_b.x_min) > 1e-12
            or abs(grid_a.x_max - grid_b.x_max) > 1e-12):
        raise GridMismatch("compare_densities needs identical spatial grids")
    return float(np.trapezoid(np.abs(grid_a.values - grid_b.values), dx=grid_a.dx))


def kde_density_on_grid(samples: np.ndarray, target: DensityGrid,
                        bandwidth: Optional[float] = None) -> DensityGrid:
    """Gaussian KDE of 1D samples tabulated on the target mesh (chunked)."""
    x = np.asarray(samples, dtype=float).reshape(-1)
    cloud = ParticleCloud(x[:, None], np.zeros(x.size))
    bw = bandwidth if bandwidth is not None else silverman_bandwidth(cloud)
    xs = target.xs
    out = np.empty_like(xs)
    chunk = max(256, 2_000_000 // max(x.size, 1)) * worker_cap()
    norm = 1.0 / (np.sqrt(2 * np.pi) * bw * x.size)
    for lo in range(0, xs.size, chunk):
        block = xs[lo:lo + chunk]
        z = (block[:, None] - x[None, :]) / bw
        out[lo:lo + chunk] = norm * np.exp(-0.5 * z * z).sum(axis=1)
    return DensityGrid(target.x_min, target.x_max, target.n_cells, out)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_TOP_KEYS = {"model", "grid", "seed", "filter", "score", "ensemble_size",
             "snapshot_times", "reference", "reference_mean", "reference_cov",
             "tolerances", "output_dir", "name"}
_GRID_KEYS = {"t_start", "t_end", "n_steps"}
_FILTER_KEYS = {"mode", "n_particles", "resample_threshold", "dx",
                "domain_half_sigmas", "store_history"}
_SCORE_KEYS = {"kind", "mean", "cov", "bandwidth", "score_clip"}
_TOL_KEYS = {"z_threshold", "l1_threshold", "moment_abs_floor"}
_MODEL_KEYS = {"A", "B", "Sigma", "obs_noise", "initial_mean", "initial_cov"}


def _reject_unknown(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


@dataclass
class ExperimentConfig:
    """Validated experiment description (see load_config for the schema)."""

    raw: dict
    model: ModelSpec
    grid: TimeGrid
    seed: int
    filter_mode: str
    filter_params: dict
    score_kind: str
    score_params: dict
    ensemble_size: int
    snapshot_times: list
    reference: str
    reference_mean: Optional[np.ndarray]
    reference_cov: Optional[np.ndarray]
    z_threshold: float
    l1_threshold: float
    moment_abs_floor: float
    output_dir: Optional[str]
    name: str

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()[:16]


def load_config(source) -> ExperimentConfig:
    """Parse and validate a config dict or JSON file path.

    Unknown keys are rejected outright so a misspelled tolerance cannot
    silently weaken a comparison.
    """
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            raw = json.load(fh)
    else:
        raw = dict(source)
    _reject_unknown(raw, _TOP_KEYS, "config")
    for key in ("model", "grid", "filter", "score", "ensemble_size",
                "snapshot_times", "reference"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")

    model_spec = raw["model"]
    if isinstance(model_spec, str):
        try:
            model = builtin_benchmarks()[model_spec]
        except KeyError:
            raise ConfigError(f"model: unknown benchmark {model_spec!r}") from None
    elif isinstance(model_spec, dict):
        _reject_unknown(model_spec, _MODEL_KEYS, "model")
        try:
            model = make_linear_gaussian(
                A=np.asarray(model_spec["A"], dtype=float),
                B=np.asarray(model_spec["B"], dtype=float),
                Sigma=np.asarray(model_spec["Sigma"], dtype=float),
                obs_noise=np.asarray(model_spec["obs_noise"], dtype=float),
                initial_mean=np.asarray(model_spec["initial_mean"], dtype=float),
                initial_cov=np.asarray(model_spec["initial_cov"], dtype=float),
                name="inline_lg",
            )
        except Exception as err:
            raise ConfigError(f"model: {err}") from err
    else:
        raise ConfigError("model must be a benchmark name or an inline LG dict")

    gd = raw["grid"]
    _reject_unknown(gd, _GRID_KEYS, "grid")
    try:
        grid = TimeGrid(float(gd["t_start"]), float(gd["t_end"]), int(gd["n_steps"]))
    except (KeyError, ValueError) as err:
        raise ConfigError(f"grid: {err}") from err

    fd = dict(raw["filter"])
    _reject_unknown(fd, _FILTER_KEYS, "filter")
    mode = fd.pop("mode", None)
    if mode not in {"kalman", "particle", "zakai_grid"}:
        raise ConfigError(f"filter.mode must be kalman|particle|zakai_grid, got {mode!r}")
    if mode == "kalman" and model.linear is None:
        raise ConfigError("filter.mode=kalman requires a linear-Gaussian model")

    sd = dict(raw["score"])
    _reject_unknown(sd, _SCORE_KEYS, "score")
    kind = sd.pop("kind", None)
    if kind not in {"exact_lg", "gaussian", "gaussian_fit", "kde", "grid"}:
        raise ConfigError(f"score.kind must name a known source, got {kind!r}")
    if kind == "exact_lg" and mode != "kalman":
        raise ConfigError("score.kind=exact_lg requires filter.mode=kalman")
    if kind == "grid" and mode != "zakai_grid":
        raise ConfigError("score.kind=grid requires filter.mode=zakai_grid")
    if kind in {"gaussian_fit", "kde"} and mode != "particle":
        raise ConfigError(f"score.kind={kind} requires filter.mode=particle")

    reference = raw["reference"]
    if reference not in {"rts", "pde", "analytic"}:
        raise ConfigError(f"reference must be rts|pde|analytic, got {reference!r}")
    if reference == "rts" and model.linear is None:
        raise ConfigError("reference=rts requires a linear-Gaussian model")
    if reference == "pde" and mode != "zakai_grid":
        raise ConfigError("reference=pde requires filter.mode=zakai_grid")
    ref_mean = ref_cov = None
    if reference == "analytic":
        if "reference_mean" not in raw or "reference_cov" not in raw:
            raise ConfigError("reference=analytic needs reference_mean/reference_cov")
        ref_mean = np.atleast_1d(np.asarray(raw["reference_mean"], dtype=float))
        ref_cov = np.atleast_2d(np.asarray(raw["reference_cov"], dtype=float))

    snapshot_times = [float(t) for t in raw["snapshot_times"]]
    for t in snapshot_times:
        try:
            grid.node_index(t)
        except GridMismatch:
            raise ConfigError(f"snapshot time {t} is not a grid node") from None

    tol = dict(raw.get("tolerances", {}))
    _reject_unknown(tol, _TOL_KEYS, "tolerances")

    n_members = int(raw["ensemble_size"])
    if n_members < 30:
        raise ConfigError("ensemble_size must be >= 30")

    return ExperimentConfig(
        raw=raw,
        model=model,
        grid=grid,
        seed=int(raw.get("seed", 0)),
        filter_mode=mode,
        filter_params=fd,
        score_kind=kind,
        score_params=sd,
        ensemble_size=n_members,
        snapshot_times=snapshot_times,
        reference=reference,
        reference_mean=ref_mean,
        reference_cov=ref_cov,
        z_threshold=float(tol.get("z_threshold", DEFAULT_Z_THRESHOLD)),
        l1_threshold=float(tol.get("l1_threshold", DEFAULT_L1_THRESHOLD)),
        moment_abs_floor=float(tol.get("moment_abs_floor", 0.0)),
        output_dir=raw.get("output_dir"),
        name=raw.get("name", "experiment"),
    )


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    """Pass/fail rows plus provenance; the JSON body is timestamp-free."""

    name: str
    rows: list
    overall_pass: bool
    provenance: dict
    artifacts: list = field(default_factory=list)

    def to_json(self) -> str:
        body = {
            "name": self.name,
            "provenance": self.provenance,
            "overall_pass": self.overall_pass,
            "rows": self.rows,
            "artifacts": self.artifacts,
        }
        return json.dumps(body, sort_keys=True, indent=2)

    def summary_lines(self) -> list[str]:
        lines = [f"[{'PASS' if self.overall_pass else 'FAIL'}] {self.name} "
                 f"(config {self.provenance['config_hash']}, seed {self.provenance['seed']})"]
        for row in self.rows:
            metric = "z" if "z" in row else "l1"
            lines.append(
                f"  {'ok ' if row['pass'] else 'BAD'} t={row.get('time', '-')} "
                f"{row['statistic']}: estimate={row['estimate']:.6g} "
                f"reference={row['reference']:.6g} {metric}={row.get(metric, 0.0):.3g}"
            )
        return lines


def _zakai_domain(config: ExperimentConfig) -> tuple[float, float]:
    """Pilot envelope: a small particle run sizes the spatial box."""
    pilot = particle_filter(config.model, _obs(config), config.grid,
                            n_particles=2000, seed=config.seed + 999)
    means = pilot.means[:, 0]
    sds = np.sqrt(pilot.covs[:, 0, 0])
    half = config.filter_params.get("domain_half_sigmas", 8.0)
    lo = float(np.min(means - half * sds))
    hi = float(np.max(means + half * sds))
    init_lo, init_hi = default_domain(
        float(config.model.initial_mean[0]), float(config.model.initial_cov[0, 0]), half
    )
    return min(lo, init_lo), max(hi, init_hi)


def _obs(config: ExperimentConfig) -> np.ndarray:
    if not hasattr(config, "_obs_cache"):
        bundle = simulate_forward(config.model, config.grid, config.seed, n_paths=1)
        object.__setattr__(config, "_obs_cache", bundle.obs_increments)
    return config._obs_cache


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None) -> ComparisonReport:
    """Execute the full pipeline described by the config and build the report.

    Writes CSV artifacts, report.json, and summary.txt into out_dir (or the
    config's output_dir) when given; the report body depends only on
    (config, seed).
    """
    model, grid = config.model, config.grid
    obs = _obs(config)
    score_clip = float(config.score_params.get("score_clip", DEFAULT_SCORE_CLIP))

    density_track = None
    if config.filter_mode == "kalman":
        track = kalman_bucy_solve(model, obs, grid)
    elif config.filter_mode == "particle":
        needs_history = config.score_kind in {"gaussian_fit", "kde"}
        track = particle_filter(
            model, obs, grid,
            n_particles=int(config.filter_params.get("n_particles", 5000)),
            seed=config.seed,
            resample_threshold=float(config.filter_params.get("resample_threshold", 0.5)),
            store_history=bool(config.filter_params.get("store_history", needs_history)),
        )
    else:  # zakai_grid
        dx = float(config.filter_params.get("dx", 0.01))
        lo, hi = _zakai_domain(config)
        n_cells = int(np.ceil((hi - lo) / dx))
        initial = gaussian_density_grid(
            float(model.initial_mean[0]), float(model.initial_cov[0, 0]),
            lo, lo + n_cells * dx, n_cells,
        )
        density_track = solve_zakai_1d(model, obs, initial, grid)
        track = density_track

    if config.score_kind == "exact_lg":
        source = ExactLGScoreSource(track, model, score_clip)
    elif config.score_kind == "gaussian":
        mean = np.atleast_1d(np.asarray(config.score_params.get("mean", model.initial_mean), dtype=float))
        cov = np.atleast_2d(np.asarray(config.score_params.get("cov", model.initial_cov), dtype=float))
        source = GaussianScoreSource(mean, cov, alpha_at(model, grid.t_start, mean), score_clip)
    elif config.score_kind == "gaussian_fit":
        source = GaussianFitScoreSource(track, model, score_clip)
    elif config.score_kind == "kde":
        source = KdeScoreSource(track, model,
                                bandwidth=config.score_params.get("bandwidth"),
                                score_clip=score_clip)
    else:
        source = GridScoreSource(density_track.densities, grid, model,
                                 score_clip=score_clip)

    snap_steps = sorted({grid.node_index(t) for t in config.snapshot_times} | {grid.n_steps})
    ensemble = backward_smoothing_flow(
        model, source, track, grid, config.ensemble_size, config.seed,
        snapshot_steps=snap_steps,
    )

    rows = []
    if config.reference == "rts":
        rts = rts_smoother(track, model, grid)
        for t in config.snapshot_times:
            i = grid.node_index(t)
            for row in compare_moments(ensemble.marginal(i), rts.means[i],
                                       rts.covs[i], config.z_threshold):
                row["time"] = t
                rows.append(row)
    elif config.reference == "analytic":
        for t in config.snapshot_times:
            i = grid.node_index(t)
            for row in compare_moments(ensemble.marginal(i), config.reference_mean,
                                       config.reference_cov, config.z_threshold):
                row["time"] = t
                rows.append(row)
    else:  # pde
        backward = solve_backward_smoothing_density_1d(
            model, density_track.densities, grid, score_clip=score_clip,
        )
        dx = density_track.densities[0].dx
        for t in config.snapshot_times:
            i = grid.node_index(t)
            samples = ensemble.marginal(i)[:, 0]
            oracle = backward.densities[i]
            ref_mean, ref_var = oracle.moments()
            est_mean = float(samples.mean())
            est_var = float(samples.var(ddof=1))
            se_mean = float(samples.std(ddof=1) / np.sqrt(samples.size))
            c = samples - est_mean
            se_var = float(np.sqrt(max((c**4).mean() - est_var**2, 0.0) / samples.size))
            tol_mean = max(config.z_threshold * se_mean, config.moment_abs_floor or 2 * dx)
            tol_var = max(config.z_threshold * se_var, config.moment_abs_floor or 2 * dx)
            rows.append({"statistic": "mean_1", "time": t, "estimate": est_mean,
                         "reference": ref_mean, "se": se_mean,
                         "z": (est_mean - ref_mean) / se_mean if se_mean > 0 else 0.0,
                         "pass": bool(abs(est_mean - ref_mean) <= tol_mean)})
            rows.append({"statistic": "var_1", "time": t, "estimate": est_var,
                         "reference": ref_var, "se": se_var,
                         "z": (est_var - ref_var) / se_var if se_var > 0 else 0.0,
                         "pass": bool(abs(est_var - ref_var) <= tol_var)})
            kde = kde_density_on_grid(samples, oracle)
            l1 = compare_densities(kde, oracle)
            rows.append({"statistic": "kde_l1", "time": t, "estimate": l1,
                         "reference": 0.0, "l1": l1,
                         "pass": bool(l1 <= config.l1_threshold)})

    report = ComparisonReport(
        name=config.name,
        rows=rows,
        overall_pass=all(r["pass"] for r in rows),
        provenance={"config_hash": config.config_hash, "seed": config.seed,
                    "version": __version__},
    )

    target = out_dir or config.output_dir
    if target:
        _write_artifacts(Path(target), config, track, ensemble, report)
    return report


def _write_artifacts(out: Path, config: ExperimentConfig, track, ensemble, report):
    out.mkdir(parents=True, exist_ok=True)
    obs = _obs(config)
    nodes = config.grid.nodes
    with open(out / "observations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "time"] + [f"dy_{j+1}" for j in range(obs.shape[1])])
        for i in range(obs.shape[0]):
            writer.writerow([i, repr(float(nodes[i]))] + [repr(float(v)) for v in obs[i]])
    if isinstance(track, FilterTrack):
        m = track.means.shape[1]
        with open(out / "filter_track.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "time"] + [f"mean_{j+1}" for j in range(m)]
                            + [f"cov_{i+1}{j+1}" for i in range(m) for j in range(m)])
            for i, t in enumerate(nodes):
                writer.writerow([i, repr(float(t))]
                                + [repr(float(v)) for v in track.means[i]]
                                + [repr(float(v)) for v in track.covs[i].ravel()])
    with open(out / "ensemble_snapshots.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        m = ensemble.states.shape[2]
        writer.writerow(["step", "time", "member_id"] + [f"x_{j+1}" for j in range(m)])
        for jj, step in enumerate(ensemble.snapshot_steps):
            for k in range(ensemble.states.shape[0]):
                writer.writerow([step, repr(float(nodes[step])), k]
                                + [repr(float(v)) for v in ensemble.states[k, jj]])
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "summary.txt").write_text("\n".join(report.summary_lines()) + "\n")
    report.artifacts = sorted(p.name for p in out.iterdir())
