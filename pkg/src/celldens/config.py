"""Experiment configuration: validation, YAML I/O, shipped benchmark defaults."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .charest import CharConfig
from .errors import ConfigError
from .gmd import GMD
from .gridpf import Grid, PFConfig
from .models import IntegratorConfig, ModelSpec
from .reference import NoiseModel

BUILTIN_SCENARIOS = ("bench2d", "bench3d_clean", "bench3d_noisy")
ESTIMATORS = ("charest", "gridpf")


def parse_fraction(value) -> float:
    """Accept plain numbers or 'a/b' strings (as in '1/3 of Scott's rule')."""
    if isinstance(value, str):
        if "/" in value:
            num, den = value.split("/", 1)
            return float(num) / float(den)
        return float(value)
    return float(value)


def _parse_gaussian(d: dict, what: str) -> GMD:
    try:
        mean = np.asarray(d["mean"], dtype=np.float64)
        cov = d["cov"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{what} needs 'mean' and 'cov'") from exc
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        cov = float(cov) * np.eye(mean.size)
    elif cov.ndim == 1:
        if cov.size != mean.size:
            raise ConfigError(f"{what}: diagonal cov length must match mean")
        cov = np.diag(cov)
    elif cov.shape != (mean.size, mean.size):
        raise ConfigError(f"{what}: cov shape {cov.shape} does not match mean")
    return GMD.single(mean, cov)


def _gaussian_dict(g: GMD) -> dict:
    return {"mean": g.means[0].tolist(), "cov": g.covs[0].tolist()}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a benchmark run needs; see ``configs/`` for shipped defaults."""

    scenario: str
    model: ModelSpec
    true_init: GMD
    est_init: GMD
    t_end: float
    dt: float
    n_cells: int
    n_meas: int
    n_gmd: int
    em_max_iter: int
    noise: NoiseModel
    estimators: tuple[str, ...]
    char: CharConfig | None
    pf: PFConfig | None
    grid: Grid | None
    integrator: IntegratorConfig
    n_repeats: int
    master_seed: int
    plot_times: tuple[float, ...]
    store_joint: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        n_steps = self.t_end / self.dt
        if self.t_end < self.dt or abs(n_steps - round(n_steps)) > 1e-9:
            raise ConfigError(
                f"t_end must be a positive multiple of dt, got {self.t_end}/{self.dt}"
            )
        if self.n_repeats < 1:
            raise ConfigError("n_repeats must be >= 1")
        if self.n_meas > self.n_cells:
            raise ConfigError("n_meas cannot exceed n_cells")
        if not self.estimators:
            raise ConfigError("select at least one estimator")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}")
        if "charest" in self.estimators and self.char is None:
            raise ConfigError("charest selected but no charest config given")
        if "gridpf" in self.estimators:
            if self.pf is None or self.grid is None:
                raise ConfigError("gridpf selected but pf/grid config missing")
            if self.model.dim != 2:
                raise ConfigError(
                    "the grid estimator only supports two-dimensional models"
                )
            if self.grid.dim != self.model.dim:
                raise ConfigError("grid dimension does not match the model")
        if self.true_init.dim != self.model.dim or self.est_init.dim != self.model.dim:
            raise ConfigError("initial densities must match the model dimension")

    @property
    def times(self) -> np.ndarray:
        n_steps = int(round(self.t_end / self.dt))
        return np.arange(n_steps + 1) * self.dt

    def to_dict(self) -> dict:
        d = {
            "scenario": self.scenario,
            "model": self.model.to_dict(),
            "true_init": _gaussian_dict(self.true_init),
            "est_init": _gaussian_dict(self.est_init),
            "time": {"t_end": self.t_end, "dt": self.dt},
            "snapshots": {
                "n_cells": self.n_cells,
                "n_meas": self.n_meas,
                "n_gmd": self.n_gmd,
                "em_max_iter": self.em_max_iter,
            },
            "noise": self.noise.to_dict(),
            "estimators": list(self.estimators),
            "integrator": {
                "rel_tol": self.integrator.rel_tol,
                "abs_tol": self.integrator.abs_tol,
            },
            "repeats": self.n_repeats,
            "seed": self.master_seed,
            "plot_times": list(self.plot_times),
            "store_joint": self.store_joint,
        }
        if self.char is not None:
            d["charest"] = {
                "n_cand": self.char.n_cand,
                "d_kl_max": self.char.d_kl_max,
                "bw_scale": self.char.bw_scale,
                "w0": self.char.w0,
                "n_gmd": self.char.n_gmd,
                "em_max_iter": self.char.em_max_iter,
            }
        if self.pf is not None and self.grid is not None:
            d["gridpf"] = {
                "grid": self.grid.to_dict(),
                "n_particles": self.pf.n_particles,
                "resample_threshold": self.pf.resample_threshold,
                "process_noise_std": self.pf.process_noise_std,
                "meas_noise_std": self.pf.meas_noise_std,
                "resample_bw_scale": self.pf.resample_bw_scale,
                "init_jitter_std": self.pf.init_jitter_std,
            }
        if self.out_dir is not None:
            d["out_dir"] = self.out_dir
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            model = ModelSpec.from_dict(d["model"])
            time_cfg = d.get("time", {})
            snap = d.get("snapshots", {})
            char_cfg = None
            if "charest" in d:
                c = d["charest"]
                char_cfg = CharConfig(
                    n_cand=int(c["n_cand"]),
                    d_kl_max=float(c["d_kl_max"]),
                    bw_scale=parse_fraction(c["bw_scale"]),
                    w0=float(c["w0"]),
                    n_gmd=int(c.get("n_gmd", 3)),
                    em_max_iter=int(c.get("em_max_iter", 500)),
                )
            pf_cfg = None
            grid = None
            if "gridpf" in d:
                p = dict(d["gridpf"])
                grid = Grid.from_dict(p.pop("grid"))
                pf_cfg = PFConfig(
                    n_particles=int(p.get("n_particles", 120)),
                    resample_threshold=parse_fraction(p.get("resample_threshold", 0.1)),
                    process_noise_std=float(p.get("process_noise_std", 0.05)),
                    meas_noise_std=float(p.get("meas_noise_std", 0.05)),
                    resample_bw_scale=parse_fraction(p.get("resample_bw_scale", 1.0)),
                    init_jitter_std=float(p.get("init_jitter_std", 0.1)),
                )
            integ = d.get("integrator", {})
            return cls(
                scenario=d.get("scenario", "custom"),
                model=model,
                true_init=_parse_gaussian(d["true_init"], "true_init"),
                est_init=_parse_gaussian(d["est_init"], "est_init"),
                t_end=float(time_cfg["t_end"]),
                dt=float(time_cfg["dt"]),
                n_cells=int(snap.get("n_cells", 1000)),
                n_meas=int(snap.get("n_meas", 300)),
                n_gmd=int(snap.get("n_gmd", 3)),
                em_max_iter=int(snap.get("em_max_iter", 500)),
                noise=NoiseModel.from_dict(d.get("noise", {"kind": "none"})),
                estimators=tuple(d.get("estimators", ("charest",))),
                char=char_cfg,
                pf=pf_cfg,
                grid=grid,
                integrator=IntegratorConfig(
                    rel_tol=float(integ.get("rel_tol", 1e-6)),
                    abs_tol=float(integ.get("abs_tol", 1e-9)),
                ),
                n_repeats=int(d.get("repeats", 1)),
                master_seed=int(d.get("seed", 0)),
                plot_times=tuple(float(t) for t in d.get("plot_times", ())),
                store_joint=bool(d.get("store_joint", False)),
                out_dir=d.get("out_dir"),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    def replace(self, **kwargs) -> "ExperimentConfig":
        d = self.to_dict()
        mapping = {
            "n_repeats": ("repeats",),
            "master_seed": ("seed",),
            "estimators": ("estimators",),
            "out_dir": ("out_dir",),
        }
        for key, value in kwargs.items():
            if key in mapping:
                d[mapping[key][0]] = value
            else:
                raise ValueError(f"cannot override {key!r}")
        return ExperimentConfig.from_dict(d)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not contain a configuration mapping")
    return ExperimentConfig.from_dict(data)


def builtin_config(name: str) -> ExperimentConfig:
    """One of the shipped benchmark scenarios (``BUILTIN_SCENARIOS``)."""
    if name not in BUILTIN_SCENARIOS:
        raise ConfigError(
            f"unknown scenario {name!r}; choose from {BUILTIN_SCENARIOS}"
        )
    text = resources.files("celldens.configs").joinpath(f"{name}.yaml").read_text()
    return ExperimentConfig.from_dict(yaml.safe_load(text))
