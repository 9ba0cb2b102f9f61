"""Command-line experiment runner.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 nothing to do.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import BUILTIN_SCENARIOS, ExperimentConfig, builtin_config, load_config
from .errors import CellDensError, ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_NOTHING = 4


def _load(config_path, scenario, seed, repeats, estimators) -> ExperimentConfig:
    if config_path is None and scenario is None:
        raise ConfigError("pass --config PATH or --scenario NAME")
    cfg = load_config(config_path) if config_path else builtin_config(scenario)
    if seed is not None:
        cfg = cfg.replace(master_seed=seed)
    if repeats is not None:
        cfg = cfg.replace(n_repeats=repeats)
    if estimators:
        cfg = cfg.replace(estimators=[e.strip() for e in estimators.split(",")])
    return cfg


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="YAML experiment configuration.")(fn)
    fn = click.option("--scenario", type=click.Choice(BUILTIN_SCENARIOS), default=None,
                      help="A shipped benchmark configuration.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Master seed override.")(fn)
    fn = click.option("--repeats", type=int, default=None, help="Repeat-count override.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), required=True,
                      help="Run output directory.")(fn)
    fn = click.option("--threads", type=int, default=1, show_default=True,
                      help="Parallel repeats (results are thread-count independent).")(fn)
    return fn


@click.group()
def main():
    """Density estimation benchmarks for heterogeneous cell populations."""


@main.command()
@_common_options
@click.option("--estimators", default=None, help="Comma list: charest,gridpf.")
def run(config_path, scenario, seed, repeats, out_dir, threads, estimators):
    """Simulate, estimate and compute error curves end to end."""
    from . import runner

    try:
        cfg = _load(config_path, scenario, seed, repeats, estimators)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        manifest = runner.run_experiment(cfg, out_dir, threads=threads)
    except CellDensError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    click.echo(f"run complete: {len(manifest.files)} files under {out_dir}")


@main.command()
@_common_options
def simulate(config_path, scenario, seed, repeats, out_dir, threads):
    """Generate the reference solution and measurement snapshots only."""
    from . import runner

    try:
        cfg = _load(config_path, scenario, seed, repeats, None)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        runner.simulate_only(cfg, out_dir, threads=threads)
    except CellDensError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    click.echo(f"snapshots written under {out_dir}")


@main.command()
@_common_options
@click.option("--estimators", default=None, help="Comma list: charest,gridpf.")
def estimate(config_path, scenario, seed, repeats, out_dir, threads, estimators):
    """Run estimators against snapshots stored by ``simulate``."""
    from . import runner

    try:
        cfg = _load(config_path, scenario, seed, repeats, estimators)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        runner.estimate_only(cfg, out_dir, threads=threads)
    except FileNotFoundError as exc:
        click.echo(f"nothing to do: {exc}", err=True)
        sys.exit(EXIT_NOTHING)
    except CellDensError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    click.echo(f"estimates written under {out_dir}")


@main.command()
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="Run directory to render.")
def plot(out_dir):
    """Render error curves and density panels for a finished run."""
    from .plots import NothingToPlot, emit_plots

    try:
        written = emit_plots(out_dir)
    except NothingToPlot as exc:
        click.echo(f"nothing to plot: {exc}", err=True)
        sys.exit(EXIT_NOTHING)
    click.echo(f"wrote {len(written)} figures under {Path(out_dir) / 'plots'}")


@main.command("validate-config")
@click.option("--config", "config_path", type=click.Path(), required=True)
def validate_config(config_path):
    """Check a configuration file and report the resolved scenario."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(
        f"ok: scenario={cfg.scenario} model={cfg.model.model_id} "
        f"steps={len(cfg.times)} estimators={','.join(cfg.estimators)}"
    )


if __name__ == "__main__":
    main()
