"""Experiment orchestration: reference simulation, estimators, errors, files.

A run directory contains::

    manifest.json            status, config echo + hash, seeds, timings, files
    config.yaml              the configuration as executed
    schema.txt               column documentation for the CSV outputs
    snapshots/run_###.json   measured samples + fitted measurement densities
    reference/run_###.npz    reference cell ensembles (times x cells x dim)
    charest_results/…        per-step estimator records + per-run L1 series
    gridpf_results/…
    errors_<dim>.csv         per-marginal aggregate error curves
    plots/                   written by ``celldens plot``

Per-repeat random streams are spawned up front from the master seed, and
estimator streams are independent of the simulation stream, so results are
identical for any ``--threads`` value and for ``run`` versus
``simulate`` + ``estimate``.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import charest, gridpf, metrics
from . import gmd as gmdlib
from .config import ExperimentConfig, config_hash
from .gmd import GMD
from .gridpf import GridNDF
from .metrics import ErrorSeries
from .reference import (
    CellEnsemble,
    SnapshotSeries,
    build_snapshot_series,
    simulate_reference,
)

SCHEMA_TEXT = """\
celldens run outputs
====================

errors_<dim>.csv
  One file per state coordinate. Comment header identifies scenario,
  estimators and seeds. Columns:
    time                  snapshot time
    <estimator>_mean      L1 error of that marginal, mean across repeats
    <estimator>_std       sample standard deviation across repeats (0 for 1 run)

snapshots/run_###.json
  {model_id, noise, entries: [{t, raw: [[value,...]], gmd: {dim,
  total_count, components: [{weight, mean, covariance}]}}]}

reference/run_###.npz
  times (T,), cells (T, n_cells, dim) reference ensembles.

charest_results/run_###.json
  wall_seconds plus steps: [{t, resampled, kl, posterior_gmd, marginals}]
  and l1: {<dim>: {times, values}}.

gridpf_results/run_###.json
  grid echo, wall_seconds, steps: [{t, n_eff, resampled, marginals:
  {<dim>: {centers, values}}}] and l1 as above.
"""

_warmed_up = False


def _warmup_kernels(cfg: ExperimentConfig) -> None:
    """Trigger JIT compilation outside the timed sections."""
    global _warmed_up
    if _warmed_up:
        return
    from .models import integrate_points

    rng = np.random.default_rng(0)
    x = cfg.true_init.means[0][None, :].repeat(2, axis=0)
    integrate_points(cfg.model, x, 0.0, 1e-3, cfg.integrator)
    from . import gmd as gmdlib

    pts = rng.normal(size=(8, 1))
    gmdlib.fit_em(pts, 1, 2, rng)
    if "gridpf" in cfg.estimators and cfg.grid is not None:
        A = gridpf.build_advection_operator(cfg.model, cfg.grid)
        v = np.full(cfg.grid.n_nodes, 1.0 / (cfg.grid.n_nodes * cfg.grid.cell_volume))
        gridpf.propagate_particle(A, GridNDF(v, cfg.grid), 1e-3, 0.0, rng, cfg.integrator)
    _warmed_up = True


@dataclass
class RepeatResult:
    index: int
    ensembles: list[CellEnsemble]
    snapshots: SnapshotSeries
    estimator_steps: dict = field(default_factory=dict)  # name -> list of records
    estimator_errors: dict = field(default_factory=dict)  # name -> {dim: ErrorSeries}
    timings: dict = field(default_factory=dict)  # name -> seconds


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    master_seed: int
    n_repeats: int
    repeat_seed_keys: list
    timings: dict
    files: list
    status: str = "ok"
    failed_stage: str | None = None

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "failed_stage": self.failed_stage,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "n_repeats": self.n_repeats,
            "repeat_seed_keys": self.repeat_seed_keys,
            "timings_seconds": self.timings,
            "files": self.files,
            "config": self.config,
        }


def _repeat_streams(master_seed: int, n_repeats: int):
    """Three independent generators (simulate, charest, gridpf) per repeat."""
    root = np.random.SeedSequence(master_seed)
    out = []
    for child in root.spawn(n_repeats):
        sim, ch, pf = child.spawn(3)
        out.append(
            {
                "simulate": np.random.default_rng(sim),
                "charest": np.random.default_rng(ch),
                "gridpf": np.random.default_rng(pf),
            }
        )
    return out


def simulate_repeat(cfg: ExperimentConfig, rng) -> tuple[list[CellEnsemble], SnapshotSeries]:
    ensembles = simulate_reference(
        cfg.model, cfg.true_init, cfg.n_cells, cfg.times, rng, cfg.integrator
    )
    snapshots = build_snapshot_series(
        ensembles, cfg.n_meas, cfg.noise, cfg.n_gmd, rng, cfg.em_max_iter
    )
    return ensembles, snapshots


def _run_charest(cfg: ExperimentConfig, snapshots: SnapshotSeries, rng):
    cc = cfg.char
    model = cfg.model
    times = cfg.times
    est_init = GMD(
        cfg.est_init.weights,
        cfg.est_init.means,
        cfg.est_init.covs,
        total_count=cfg.n_cells,
    )
    start = time.perf_counter()
    state = charest.init(est_init, model, cc, rng)
    # the t=0 entry is the initialization; snapshots are assimilated from t=dt
    posteriors: list[GMD] = [est_init]
    flags = [(None, False)]
    for k in range(1, len(times)):
        state = charest.predict(state, model, float(times[k]), cc, cfg.integrator, rng)
        state = charest.update(state, snapshots.entries[k].fitted, cc)
        posteriors.append(state.posterior_gmd)
        state = charest.maybe_resample(state, model, cc, rng)
        flags.append((float(state.last_kl), bool(state.resampled)))
    wall = time.perf_counter() - start

    steps = []
    for k, t in enumerate(times):
        kl, resampled = flags[k]
        rec = {
            "t": float(t),
            "resampled": resampled,
            "kl": None if kl is None else float(kl),
            "posterior_gmd": posteriors[k].to_dict(),
            "marginals": {
                name: gmdlib.marginalize(posteriors[k], [dim]).to_dict()
                for dim, name in enumerate(model.state_names)
            },
        }
        steps.append(rec)
    return steps, posteriors, wall


def _run_gridpf(cfg: ExperimentConfig, snapshots: SnapshotSeries, rng):
    grid, pfc, model = cfg.grid, cfg.pf, cfg.model
    mdims = model.measured_dims
    times = cfg.times
    start = time.perf_counter()
    A = gridpf.build_advection_operator(model, grid)
    C = gridpf.build_measurement_matrix(grid, mdims)
    state = gridpf.pf_init(cfg.est_init, grid, pfc, rng)
    # t=0 entry is the jittered initial ensemble; first step consumes t=dt
    posts = [gridpf.posterior_mean(state)]
    infos = [(state.n_eff, state.resampled)]
    for k in range(1, len(times)):
        state = gridpf.pf_step(
            state,
            A,
            C,
            snapshots.entries[k].fitted,
            cfg.dt,
            pfc,
            rng,
            cfg.integrator,
            mdims,
        )
        posts.append(gridpf.posterior_mean(state))
        infos.append((state.n_eff, state.resampled))
    wall = time.perf_counter() - start

    marg_ops = {
        name: gridpf.build_measurement_matrix(grid, [dim])
        for dim, name in enumerate(model.state_names)
    }
    steps = []
    for k, t in enumerate(times):
        n_eff, resampled = infos[k]
        rec = {
            "t": float(t),
            "n_eff": float(n_eff),
            "resampled": bool(resampled),
            "marginals": {
                name: {
                    "centers": grid.axis_centers(dim).tolist(),
                    "values": (marg_ops[name] @ posts[k].values).tolist(),
                }
                for dim, name in enumerate(model.state_names)
            },
        }
        if cfg.store_joint:
            rec["posterior_mean"] = posts[k].values.tolist()
        steps.append(rec)
    return steps, posts, wall


def _compute_errors(cfg, estimator, per_step, ensembles, repeat_index, ref_quads):
    out = {}
    for dim, name in enumerate(cfg.model.state_names):
        values = []
        for k in range(len(ensembles)):
            key = (k, dim)
            if key not in ref_quads:
                ref_quads[key] = metrics.reference_quadrature(ensembles[k], dim)
            x, ref_values = ref_quads[key]
            values.append(
                metrics.l1_against_reference_values(per_step[k], dim, x, ref_values)
            )
        out[name] = ErrorSeries(
            cfg.times, np.array(values), estimator, name, repeat_index
        )
    return out


def run_repeat(cfg: ExperimentConfig, index: int, streams, estimators=None) -> RepeatResult:
    """Simulate one repeat and run the selected estimators on its snapshots."""
    estimators = cfg.estimators if estimators is None else estimators
    ensembles, snapshots = simulate_repeat(cfg, streams["simulate"])
    res = RepeatResult(index, ensembles, snapshots)
    estimate_repeat(cfg, res, streams, estimators)
    return res


def estimate_repeat(cfg, res: RepeatResult, streams, estimators) -> None:
    """Run estimators on an existing repeat's snapshots (in place)."""
    ref_quads: dict = {}
    for est in estimators:
        if est == "charest":
            steps, posts, wall = _run_charest(cfg, res.snapshots, streams["charest"])
        elif est == "gridpf":
            steps, posts, wall = _run_gridpf(cfg, res.snapshots, streams["gridpf"])
        else:
            raise ValueError(f"unknown estimator {est!r}")
        res.estimator_steps[est] = steps
        res.estimator_errors[est] = _compute_errors(
            cfg, est, posts, res.ensembles, res.index, ref_quads
        )
        res.timings[est] = wall


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, separators=(",", ":")) + "\n")


def _persist_repeat(cfg, out: Path, res: RepeatResult, estimators) -> list[str]:
    files = []
    tag = f"run_{res.index:03d}"
    snap_dir = out / "snapshots"
    ref_dir = out / "reference"
    snap_dir.mkdir(exist_ok=True)
    ref_dir.mkdir(exist_ok=True)

    snap_path = snap_dir / f"{tag}.json"
    _write_json(snap_path, res.snapshots.to_dict())
    files.append(str(snap_path.relative_to(out)))

    ref_path = ref_dir / f"{tag}.npz"
    np.savez_compressed(
        ref_path,
        times=np.array([e.time for e in res.ensembles]),
        cells=np.stack([e.cells for e in res.ensembles]),
    )
    files.append(str(ref_path.relative_to(out)))

    for est in estimators:
        est_dir = out / f"{est}_results"
        est_dir.mkdir(exist_ok=True)
        payload = {
            "wall_seconds": res.timings[est],
            "steps": res.estimator_steps[est],
            "l1": {
                name: {
                    "times": s.times.tolist(),
                    "values": s.values.tolist(),
                }
                for name, s in res.estimator_errors[est].items()
            },
        }
        if est == "gridpf":
            payload["grid"] = cfg.grid.to_dict()
        p = est_dir / f"{tag}.json"
        _write_json(p, payload)
        files.append(str(p.relative_to(out)))
    return files


def _write_error_csvs(cfg, out: Path, results: list[RepeatResult], estimators):
    files = []
    seeds = f"master={cfg.master_seed} repeats={len(results)}"
    for name in cfg.model.state_names:
        aggs = {}
        for est in estimators:
            series = [r.estimator_errors[est][name] for r in results]
            aggs[est] = metrics.average_runs(series)
        path = out / f"errors_{name}.csv"
        lines = [
            f"# scenario={cfg.scenario} marginal={name} "
            f"estimators={','.join(estimators)} {seeds}"
        ]
        header = ["time"]
        for est in estimators:
            header += [f"{est}_mean", f"{est}_std"]
        lines.append(",".join(header))
        times = cfg.times
        for i, t in enumerate(times):
            row = [repr(float(t))]
            for est in estimators:
                row += [repr(float(aggs[est].mean[i])), repr(float(aggs[est].std[i]))]
            lines.append(",".join(row))
        path.write_text("\n".join(lines) + "\n")
        files.append(str(path.relative_to(out)))
    return files


def _run_many(cfg, estimators, threads, existing=None):
    """Execute all repeats, optionally reusing stored simulate outputs."""
    streams = _repeat_streams(cfg.master_seed, cfg.n_repeats)
    results: list[RepeatResult | None] = [None] * cfg.n_repeats

    def job(i: int) -> RepeatResult:
        if existing is not None:
            res = RepeatResult(i, existing[i][0], existing[i][1])
            estimate_repeat(cfg, res, streams[i], estimators)
            return res
        return run_repeat(cfg, i, streams[i], estimators)

    if threads <= 1 or cfg.n_repeats == 1:
        for i in range(cfg.n_repeats):
            results[i] = job(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(job, i): i for i in range(cfg.n_repeats)}
            for fut, i in futures.items():
                results[i] = fut.result()
    return results


def _manifest_skeleton(cfg) -> RunManifest:
    return RunManifest(
        config=cfg.to_dict(),
        config_hash=config_hash(cfg),
        master_seed=cfg.master_seed,
        n_repeats=cfg.n_repeats,
        repeat_seed_keys=[[cfg.master_seed, i] for i in range(cfg.n_repeats)],
        timings={},
        files=[],
    )


def _finalize(cfg, out: Path, manifest: RunManifest) -> RunManifest:
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    (out / "schema.txt").write_text(SCHEMA_TEXT)
    _write_json(out / "manifest.json", manifest.to_dict())
    return manifest


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    threads: int = 1,
    estimators=None,
) -> RunManifest:
    """End-to-end: simulate, estimate, compute errors, persist everything."""
    estimators = list(cfg.estimators if estimators is None else estimators)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_skeleton(cfg)
    stage = "simulate+estimate"
    try:
        _warmup_kernels(cfg)
        results = _run_many(cfg, estimators, threads)
        stage = "persist"
        for res in results:
            manifest.files += _persist_repeat(cfg, out, res, estimators)
        stage = "metrics"
        manifest.files += _write_error_csvs(cfg, out, results, estimators)
        manifest.timings = {
            est: [r.timings[est] for r in results] for est in estimators
        }
    except Exception as exc:
        manifest.status = "failed"
        manifest.failed_stage = f"{stage}: {exc}"
        _finalize(cfg, out, manifest)
        raise
    return _finalize(cfg, out, manifest)


def simulate_only(cfg: ExperimentConfig, out_dir, threads: int = 1) -> RunManifest:
    """Reference + snapshots only; results can be estimated later."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_skeleton(cfg)
    stage = "simulate"
    try:
        _warmup_kernels(cfg)
        streams = _repeat_streams(cfg.master_seed, cfg.n_repeats)

        def job(i):
            ens, snaps = simulate_repeat(cfg, streams[i]["simulate"])
            return RepeatResult(i, ens, snaps)

        if threads <= 1 or cfg.n_repeats == 1:
            results = [job(i) for i in range(cfg.n_repeats)]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(job, range(cfg.n_repeats)))
        stage = "persist"
        for res in results:
            manifest.files += _persist_repeat(cfg, out, res, [])
    except Exception as exc:
        manifest.status = "failed"
        manifest.failed_stage = f"{stage}: {exc}"
        _finalize(cfg, out, manifest)
        raise
    return _finalize(cfg, out, manifest)


def load_repeat(cfg: ExperimentConfig, out: Path, index: int):
    """Read one repeat's stored simulate outputs back."""
    tag = f"run_{index:03d}"
    snap = SnapshotSeries.from_dict(
        json.loads((out / "snapshots" / f"{tag}.json").read_text())
    )
    with np.load(out / "reference" / f"{tag}.npz") as ref:
        times = ref["times"]
        cells = ref["cells"]
    ensembles = [
        CellEnsemble(float(t), cells[i], cfg.model) for i, t in enumerate(times)
    ]
    return ensembles, snap


def estimate_only(
    cfg: ExperimentConfig,
    out_dir,
    threads: int = 1,
    estimators=None,
) -> RunManifest:
    """Run estimators against a directory produced by ``simulate_only``."""
    estimators = list(cfg.estimators if estimators is None else estimators)
    out = Path(out_dir)
    if not (out / "snapshots").exists():
        raise FileNotFoundError(f"no snapshots found under {out}")
    manifest = _manifest_skeleton(cfg)
    stage = "load"
    try:
        _warmup_kernels(cfg)
        existing = [load_repeat(cfg, out, i) for i in range(cfg.n_repeats)]
        stage = "estimate"
        results = _run_many(cfg, estimators, threads, existing=existing)
        stage = "persist"
        for res in results:
            manifest.files += _persist_repeat(cfg, out, res, estimators)
        stage = "metrics"
        manifest.files += _write_error_csvs(cfg, out, results, estimators)
        manifest.timings = {
            est: [r.timings[est] for r in results] for est in estimators
        }
    except Exception as exc:
        manifest.status = "failed"
        manifest.failed_stage = f"{stage}: {exc}"
        _finalize(cfg, out, manifest)
        raise
    return _finalize(cfg, out, manifest)
