"""Command-line entry point: smoothlab <subcommand> --config <path> [...].

Subcommands mirror the pipeline stages: simulate, filter, smooth, reverse,
oracle, verify, report. `verify` runs the bundled acceptance configs and
exits nonzero if any comparison fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, SmoothlabError
from .filtering import kalman_bucy_solve, particle_filter
from .harness import ComparisonReport, load_config, run_experiment
from .pde import gaussian_density_grid, solve_fokker_planck_1d, solve_zakai_1d
from .sde import export_observation_csv, export_signal_csv, simulate_forward

BUNDLED_CONFIGS = ("lg1d_rts.json", "lg2d_rts.json", "ou_reversal.json",
                   "sine1d_pde.json")
QUICK_ENSEMBLE = 5000


def _load(args) -> "ExperimentConfig":
    config = load_config(args.config)
    if args.seed is not None:
        raw = dict(config.raw)
        raw["seed"] = args.seed
        config = load_config(raw)
    return config


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_simulate(args) -> int:
    config = _load(args)
    out = _out_dir(args, "smoothlab_out")
    bundle = simulate_forward(config.model, config.grid, config.seed, n_paths=1)
    export_signal_csv(bundle, str(out / "signal.csv"))
    export_observation_csv(bundle, str(out / "observations.csv"))
    print(f"wrote signal.csv and observations.csv to {out}")
    return 0


def _cmd_filter(args) -> int:
    config = _load(args)
    out = _out_dir(args, "smoothlab_out")
    bundle = simulate_forward(config.model, config.grid, config.seed, n_paths=1)
    obs = bundle.obs_increments
    nodes = config.grid.nodes
    if config.filter_mode == "kalman":
        track = kalman_bucy_solve(config.model, obs, config.grid)
    elif config.filter_mode == "particle":
        track = particle_filter(
            config.model, obs, config.grid,
            n_particles=int(config.filter_params.get("n_particles", 5000)),
            seed=config.seed,
        )
    else:
        raise ConfigError("use the oracle subcommand for zakai_grid filtering")
    m = track.means.shape[1]
    with open(out / "filter_track.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "time"] + [f"mean_{j+1}" for j in range(m)]
                        + [f"cov_{i+1}{j+1}" for i in range(m) for j in range(m)])
        for i, t in enumerate(nodes):
            writer.writerow([i, repr(float(t))]
                            + [repr(float(v)) for v in track.means[i]]
                            + [repr(float(v)) for v in track.covs[i].ravel()])
    print(f"wrote filter_track.csv to {out} "
          f"(log-normalizer {track.log_normalizer[-1]:.6f})")
    return 0


def _has_null_sensor(model, t: float) -> bool:
    m = model.dim_state
    probes = np.vstack([np.zeros(m), np.ones(m), -np.ones(m), 2.5 * np.ones(m)])
    return bool(np.allclose(np.asarray(model.sensor(t, probes), dtype=float), 0.0))


def _cmd_oracle(args) -> int:
    """Grid-PDE reference run: Zakai filter, or Fokker-Planck for null sensors."""
    config = _load(args)
    model, grid = config.model, config.grid
    if model.dim_state != 1:
        raise ConfigError("the oracle subcommand handles 1D models only")
    out = _out_dir(args, "smoothlab_out")
    dx = float(config.filter_params.get("dx", 0.01))
    half = float(config.filter_params.get("domain_half_sigmas", 8.0))
    var0 = float(model.initial_cov[0, 0])
    spread = np.sqrt(max(var0, 1e-6)) + np.sqrt(grid.t_end - grid.t_start) * 3.0
    lo = float(model.initial_mean[0]) - half * spread
    n_cells = int(np.ceil(2 * half * spread / dx))
    initial = gaussian_density_grid(float(model.initial_mean[0]), max(var0, dx * dx),
                                   lo, lo + n_cells * dx, n_cells)
    null_sensor = _has_null_sensor(model, grid.t_start)
    if null_sensor:
        densities = solve_fokker_planck_1d(model, initial, grid)
        kind = "fokker_planck"
    else:
        obs = simulate_forward(model, grid, config.seed, n_paths=1).obs_increments
        densities = solve_zakai_1d(model, obs, initial, grid).densities
        kind = "zakai"
    nodes = grid.nodes
    with open(out / "densities.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "time", "x", "p"])
        for i, dens in enumerate(densities):
            for x, p in zip(dens.xs, dens.values):
                writer.writerow([i, repr(float(nodes[i])), repr(float(x)), repr(float(p))])
    print(f"wrote densities.csv ({kind}, {len(densities)} nodes) to {out}")
    return 0


def _run_and_report(config, args) -> int:
    out = _out_dir(args, "smoothlab_out")
    report = run_experiment(config, out_dir=str(out))
    print("\n".join(report.summary_lines()))
    return 0 if report.overall_pass else 1


def _cmd_smooth(args) -> int:
    return _run_and_report(_load(args), args)


def _cmd_reverse(args) -> int:
    """Signal time-reversal run: smoothing with a null sensor."""
    config = _load(args)
    if not _has_null_sensor(config.model, config.grid.t_start):
        raise ConfigError("reverse requires a model with a null sensor (b = 0)")
    return _run_and_report(config, args)


def _cmd_verify(args) -> int:
    out = _out_dir(args, "smoothlab_verify")
    reports: list[ComparisonReport] = []
    for name in BUNDLED_CONFIGS:
        with resources.files("smoothlab").joinpath("configs", name).open() as fh:
            raw = json.load(fh)
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.quick:
            raw["ensemble_size"] = min(raw["ensemble_size"], QUICK_ENSEMBLE)
        config = load_config(raw)
        sub = out / Path(name).stem
        reports.append(run_experiment(config, out_dir=str(sub)))
    overall = all(r.overall_pass for r in reports)
    lines = []
    for r in reports:
        lines.extend(r.summary_lines())
    lines.append(f"verify: {'PASS' if overall else 'FAIL'} "
                 f"({sum(r.overall_pass for r in reports)}/{len(reports)} configs)")
    body = {
        "version": __version__,
        "overall_pass": overall,
        "configs": [{"name": r.name, "provenance": r.provenance,
                     "overall_pass": r.overall_pass, "rows": r.rows}
                    for r in reports],
    }
    (out / "report.json").write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if overall else 1


def _cmd_report(args) -> int:
    path = Path(args.config)
    body = json.loads(path.read_text())
    if "configs" in body:  # verify-style aggregate
        for entry in body["configs"]:
            print(f"[{'PASS' if entry['overall_pass'] else 'FAIL'}] {entry['name']} "
                  f"(config {entry['provenance']['config_hash']})")
            for row in entry["rows"]:
                print(f"  {'ok ' if row['pass'] else 'BAD'} {row['statistic']}: "
                      f"z={row.get('z', row.get('l1', 0.0)):.3g}")
        return 0 if body["overall_pass"] else 1
    report = ComparisonReport(name=body["name"], rows=body["rows"],
                              overall_pass=body["overall_pass"],
                              provenance=body["provenance"])
    print("\n".join(report.summary_lines()))
    return 0 if report.overall_pass else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothlab",
        description="Backward smoothing-diffusion laboratory",
    )
    parser.add_argument("--version", action="version", version=f"smoothlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "simulate": (_cmd_simulate, "simulate the signal/observation pair"),
        "filter": (_cmd_filter, "run the configured filter"),
        "smooth": (_cmd_smooth, "full backward-smoothing pipeline with comparison"),
        "reverse": (_cmd_reverse, "time-reversal run (null-sensor smoothing)"),
        "oracle": (_cmd_oracle, "grid-PDE reference densities"),
        "verify": (_cmd_verify, "run the bundled acceptance configs"),
        "report": (_cmd_report, "pretty-print an existing report.json"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        if name == "verify":
            p.add_argument("--quick", action="store_true",
                           help="cap ensemble sizes for a fast smoke run")
        else:
            p.add_argument("--config", required=True,
                           help="experiment config JSON (or report.json for report)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SmoothlabError, OSError, json.JSONDecodeError) as err:
        print(f"smoothlab {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
