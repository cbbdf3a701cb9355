"""Batch command-line interface: run samplers, summarize chains, make data.

Every ``run`` invocation is reproducible: the manifest records the full
configuration, its hash, and the SHA-256 of every output file, and rerunning
the same configuration writes byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from pathlib import Path

import click
import numpy as np

from . import __version__
from .benchmarks import DEFAULT_DATA_SEED, elliptic_benchmark, pet_benchmark
from .config import ExperimentConfig, preset, preset_names
from .diagnostics import ChainStats
from .grids import Grid
from .io import (
    read_chain_csv,
    write_chain_csv,
    write_field_matrix,
    write_json_sidecar,
)
from .posterior import HyperParams
from .prior import PriorModel, assemble_fem_operators, sample_prior
from .rto import build_rto_map
from .samplers import rto_mh, rto_pm, rto_within_gibbs

WORKERS_ENV = "HIBRTO_WORKERS"


@click.group()
@click.version_option(version=__version__)
def main():
    """Optimization-based MCMC for hierarchical Bayesian inversion."""


def _load_config(config_path: str | None, preset_name: str | None) -> ExperimentConfig:
    if (config_path is None) == (preset_name is None):
        raise click.UsageError("pass exactly one of --config or --preset")
    if preset_name is not None:
        try:
            return preset(preset_name)
        except ValueError as error:
            raise click.UsageError(str(error)) from None
    try:
        payload = json.loads(Path(config_path).read_text())
    except json.JSONDecodeError as error:
        raise click.UsageError(f"{config_path}: not valid JSON: {error}") from None
    if not isinstance(payload, dict):
        raise click.UsageError(f"{config_path}: expected a JSON object")
    try:
        return ExperimentConfig.from_dict(payload)
    except (ValueError, TypeError) as error:
        raise click.UsageError(f"{config_path}: {error}") from None


def _resolve_workers(flag: int | None, configured: int | None) -> int:
    """Worker-count precedence: flag, then environment, then config, then 1."""
    if flag is not None:
        if flag < 1:
            raise click.UsageError("--workers must be a positive integer")
        return flag
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            value = 0
        if value < 1:
            raise click.UsageError(
                f"{WORKERS_ENV} must be a positive integer, got {env!r}"
            )
        return value
    return configured if configured is not None else 1


def _benchmark_for(config: ExperimentConfig):
    if config.problem == "elliptic":
        return elliptic_benchmark(config.size, data_seed=config.data_seed)
    return pet_benchmark(config.size, data_seed=config.data_seed)


def _initial_params(config: ExperimentConfig, problem) -> HyperParams | None:
    overrides = (config.init_lam, config.init_delta, config.init_gamma)
    if all(value is None for value in overrides):
        return None
    lo, hi = problem.hyper.gamma_bounds
    return HyperParams(
        lam=config.init_lam if config.init_lam is not None else 1.0,
        delta=config.init_delta if config.init_delta is not None else 1.0,
        gamma=config.init_gamma if config.init_gamma is not None else math.sqrt(lo * hi),
    )


def _thin_indices(steps: int, every: int) -> np.ndarray:
    return np.arange(every - 1, steps, every)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _as_2d_fields(fields: np.ndarray, n: int) -> np.ndarray:
    return fields if fields.size else np.zeros((0, n))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON file with an experiment configuration.")
@click.option("--preset", "preset_name", metavar="NAME",
              help=f"Built-in configuration: {', '.join(preset_names())}.")
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.option("--workers", type=int, default=None,
              help=f"Parallel proposal solves (overrides ${WORKERS_ENV} and config).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".",
              show_default=True, help="Directory for chain.csv, fields.bin, manifest.json.")
def run(config_path, preset_name, seed, workers, out_dir):
    """Run the configured sampler and write chain, fields, and manifest."""
    config = _load_config(config_path, preset_name)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    worker_count = _resolve_workers(workers, config.workers)

    benchmark = _benchmark_for(config)
    problem = benchmark.problem
    init_params = _initial_params(config, problem)
    rng = np.random.default_rng(config.seed)

    if config.sampler == "gibbs":
        result = rto_within_gibbs(
            problem,
            config.steps,
            rng,
            inner_steps=config.inner_steps,
            init_params=init_params,
            trust_region=config.trust_region,
            workers=worker_count,
            store_fields_every=config.store_fields_every,
            gamma_grid_size=config.gamma_grid_size,
        )
        columns = {
            "step": np.arange(config.steps, dtype=float),
            "lam": result.lam,
            "delta": result.delta,
            "gamma": result.gamma,
            "probe": result.probe,
            "log_weight": result.log_weights,
        }
        fields = result.fields
        field_steps = result.field_steps
        counters = {
            "inner_accepted": result.inner_accepted,
            "inner_proposed": result.inner_proposed,
            "inner_failed": result.inner_failed,
            "gamma_accepted": result.gamma_accepted,
        }
        probe_index = result.probe_index
    elif config.sampler == "pm":
        result = rto_pm(
            problem,
            config.steps,
            rng,
            k=config.k,
            init_params=init_params,
            sample_mask=config.sample_mask,
            burn_in=config.effective_burn_in,
            trust_region=config.trust_region,
            workers=worker_count,
            store_fields_every=config.store_fields_every,
        )
        columns = {
            "step": np.arange(config.steps, dtype=float),
            "lam": result.lam,
            "delta": result.delta,
            "gamma": result.gamma,
            "probe": result.probe,
            "log_pm": result.log_pm,
        }
        fields = result.fields
        field_steps = result.field_steps
        counters = {"accepted": result.accepted, "failed_steps": result.failed_steps}
        probe_index = result.probe_index
    else:  # fixed-hyperparameter independence MH
        lo, hi = problem.hyper.gamma_bounds
        params = init_params or HyperParams(lam=1.0, delta=1.0, gamma=math.sqrt(lo * hi))
        rto_map = build_rto_map(problem, params, trust_region=config.trust_region)
        result = rto_mh(rto_map, config.steps, rng, workers=worker_count)
        probe_index = problem.n // 2
        columns = {
            "step": np.arange(config.steps, dtype=float),
            "probe": result.fields[:, probe_index],
            "log_weight": result.log_weights,
        }
        keep = _thin_indices(config.steps, config.store_fields_every)
        fields = result.fields[keep]
        field_steps = keep
        counters = {
            "accepted": result.accepted,
            "proposed": result.proposed,
            "failed_proposals": result.failed_proposals,
        }

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chain_path = out / "chain.csv"
    fields_path = out / "fields.bin"
    manifest_path = out / "manifest.json"

    write_chain_csv(chain_path, columns)
    write_field_matrix(fields_path, _as_2d_fields(np.asarray(fields), problem.n))
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "package_version": __version__,
        "field_dimension": problem.n,
        "data_dimension": problem.m,
        "probe_index": int(probe_index),
        "field_steps": [int(s) for s in field_steps],
        "counters": counters,
        "outputs": {
            "chain.csv": _sha256(chain_path),
            "fields.bin": _sha256(fields_path),
        },
    }
    write_json_sidecar(manifest_path, manifest)

    stored = len(manifest["field_steps"])
    click.echo(f"wrote {chain_path} ({config.steps} steps)")
    click.echo(f"wrote {fields_path} ({stored} x {problem.n})")
    click.echo(f"wrote {manifest_path} (config {config.config_hash()[:12]})")
    for name, value in counters.items():
        click.echo(f"  {name}: {value}")


@main.command()
@click.argument("chain_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--burn-in", type=int, default=0, show_default=True,
              help="Rows to drop from the start of every column.")
@click.option("--column", "selected", multiple=True,
              help="Column to summarize (repeatable; default: all but 'step').")
@click.option("--level", type=float, default=0.95, show_default=True,
              help="Credible-interval level.")
def diagnose(chain_file, burn_in, selected, level):
    """Summarize a chain CSV: mean, spread, autocorrelation time, ESS."""
    try:
        columns = read_chain_csv(chain_file)
    except ValueError as error:
        raise click.UsageError(str(error)) from None
    names = list(selected) if selected else [c for c in columns if c != "step"]
    missing = [name for name in names if name not in columns]
    if missing:
        raise click.UsageError(
            f"no such column(s): {', '.join(missing)}; available: {', '.join(columns)}"
        )
    if burn_in < 0:
        raise click.UsageError("--burn-in must be nonnegative")

    header = (
        f"{'column':<12} {'mean':>12} {'std':>12} {'iact':>8} "
        f"{'ess':>9} {f'{level:.0%} interval':>28}"
    )
    click.echo(header)
    for name in names:
        values = columns[name][burn_in:]
        if values.size < 2:
            raise click.UsageError(
                f"column {name!r} has {values.size} rows after burn-in; need >= 2"
            )
        stats = ChainStats.from_chain(values, level=level)
        lo, hi = stats.interval
        click.echo(
            f"{name:<12} {stats.mean:>12.6g} {stats.std:>12.6g} "
            f"{stats.iact:>8.2f} {stats.ess:>9.1f} "
            f"{f'[{lo:.6g}, {hi:.6g}]':>28}"
        )


@main.command("gen-data")
@click.option("--problem", type=click.Choice(["elliptic", "pet"]), required=True)
@click.option("--size", type=int, required=True,
              help="Grid nodes per axis at the inference resolution.")
@click.option("--data-seed", type=int, default=DEFAULT_DATA_SEED, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".",
              show_default=True, help="Directory for data.csv, truth.bin, meta.json.")
def gen_data(problem, size, data_seed, out_dir):
    """Write one benchmark's observations, true field, and metadata."""
    try:
        benchmark = (
            elliptic_benchmark(size, data_seed=data_seed)
            if problem == "elliptic"
            else pet_benchmark(size, data_seed=data_seed)
        )
    except ValueError as error:
        raise click.UsageError(str(error)) from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_chain_csv(out / "data.csv", {"y": benchmark.problem.y})
    write_field_matrix(out / "truth.bin", benchmark.u_true[None, :])
    meta = {
        "problem": problem,
        "size": size,
        "data_seed": data_seed,
        "observation_kind": benchmark.problem.kind,
        "lam_true": benchmark.lam_true,
        "field_dimension": benchmark.problem.n,
        "data_dimension": benchmark.problem.m,
    }
    model = benchmark.problem.model
    if problem == "pet":
        meta["geometry"] = {
            "n_sources": model.geometry.n_sources,
            "rays_per_source": model.geometry.rays_per_source,
            "n_rays": model.geometry.n_rays,
            "domain_bounds": list(model.grid.bounds[0]),
            "attenuation_length": model.attenuation_length,
        }
    write_json_sidecar(out / "meta.json", meta)
    click.echo(f"wrote {out / 'data.csv'} ({benchmark.problem.m} observations)")
    click.echo(f"wrote {out / 'truth.bin'} (1 x {benchmark.problem.n})")
    click.echo(f"wrote {out / 'meta.json'}")


@main.command("prior-sample")
@click.option("--dimension", type=click.Choice(["1", "2"]), default="1",
              show_default=True, help="Interval (1) or square (2) domain.")
@click.option("--size", type=int, required=True, help="Grid nodes per axis.")
@click.option("--delta", type=float, required=True, help="Field precision scale.")
@click.option("--gamma", type=float, required=True, help="Smoothness parameter.")
@click.option("--count", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_file", type=click.Path(dir_okay=False),
              default="prior-samples.bin", show_default=True)
def prior_sample(dimension, size, delta, gamma, count, seed, out_file):
    """Draw zero-mean prior fields and write them as one matrix row each."""
    if count < 1:
        raise click.UsageError("--count must be a positive integer")
    try:
        grid = Grid.interval(size) if dimension == "1" else Grid.square(size)
        operators = assemble_fem_operators(grid)
        model = PriorModel(
            operators=operators, mean=np.zeros(grid.n), delta=delta, gamma=gamma
        )
    except ValueError as error:
        raise click.UsageError(str(error)) from None
    rng = np.random.default_rng(seed)
    draws = np.array([sample_prior(model, rng) for _ in range(count)])
    write_field_matrix(out_file, draws)
    click.echo(f"wrote {out_file} ({count} x {grid.n})")


if __name__ == "__main__":
    main()
