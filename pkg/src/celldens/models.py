"""Benchmark single-cell models and the shared adaptive ODE integrator.

Two models are built in.  ``growth2d`` tracks cell size ``z`` and a constant
per-cell growth rate ``g``: size grows linearly until a threshold, then
relaxes toward a saturation size.  ``gene_expr3d`` tracks mRNA ``z1``,
protein ``z2`` and a constant per-cell transcription rate ``k1`` with linear
production/degradation kinetics.  Only a subset of coordinates is measurable
(size, respectively protein concentration).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import IntegrationError

GROWTH2D = "growth2d"
GENE_EXPR3D = "gene_expr3d"

_MODEL_CODES = {GROWTH2D: kernels.MODEL_GROWTH2D, GENE_EXPR3D: kernels.MODEL_GENE_EXPR3D}
_STATE_NAMES = {GROWTH2D: ("z", "g"), GENE_EXPR3D: ("z1", "z2", "k1")}


@dataclass(frozen=True)
class ModelSpec:
    """A single-cell model identifier, its parameters and measured coordinates."""

    model_id: str
    params: tuple[float, ...]
    measured_dims: tuple[int, ...]

    def __post_init__(self):
        if self.model_id not in _MODEL_CODES:
            raise ValueError(f"unknown model {self.model_id!r}")
        dims = tuple(int(i) for i in self.measured_dims)
        if len(dims) == 0 or len(set(dims)) != len(dims):
            raise ValueError("measured_dims must be a nonempty set of indices")
        if any(i < 0 or i >= self.dim for i in dims):
            raise ValueError(f"measured_dims {dims} out of range for {self.model_id}")
        object.__setattr__(self, "measured_dims", dims)
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    @classmethod
    def growth2d(cls, z_star: float = 3.5, z_max: float = 6.0, measured_dims=(0,)):
        if not 0.0 < z_star < z_max:
            raise ValueError(f"need 0 < z_star < z_max, got {z_star}, {z_max}")
        return cls(GROWTH2D, (z_star, z_max), tuple(measured_dims))

    @classmethod
    def gene_expr3d(cls, k2: float = 2.0, measured_dims=(1,)):
        if k2 <= 0.0:
            raise ValueError(f"need k2 > 0, got {k2}")
        return cls(GENE_EXPR3D, (k2,), tuple(measured_dims))

    @property
    def dim(self) -> int:
        return len(_STATE_NAMES[self.model_id])

    @property
    def state_names(self) -> tuple[str, ...]:
        return _STATE_NAMES[self.model_id]

    @property
    def measured_names(self) -> tuple[str, ...]:
        return tuple(self.state_names[i] for i in self.measured_dims)

    def to_dict(self) -> dict:
        if self.model_id == GROWTH2D:
            p = {"z_star": self.params[0], "z_max": self.params[1]}
        else:
            p = {"k2": self.params[0]}
        return {"id": self.model_id, **p, "measured_dims": list(self.measured_dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        model_id = d.pop("id")
        measured = d.pop("measured_dims", None)
        if model_id == GROWTH2D:
            kwargs = {"z_star": d.get("z_star", 3.5), "z_max": d.get("z_max", 6.0)}
            if measured is not None:
                kwargs["measured_dims"] = tuple(measured)
            return cls.growth2d(**kwargs)
        if model_id == GENE_EXPR3D:
            kwargs = {"k2": d.get("k2", 2.0)}
            if measured is not None:
                kwargs["measured_dims"] = tuple(measured)
            return cls.gene_expr3d(**kwargs)
        raise ValueError(f"unknown model {model_id!r}")


@dataclass(frozen=True)
class IntegratorConfig:
    """Tolerances for the adaptive Dormand-Prince 5(4) integrator."""

    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    max_step: float = math.inf

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0 or self.max_step <= 0:
            raise ValueError("integrator tolerances and max_step must be positive")


def _as_points(model: ModelSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.ndim != 2 or pts.shape[1] != model.dim:
        raise ValueError(
            f"expected points of dimension {model.dim} for {model.model_id}, "
            f"got shape {x.shape}"
        )
    return pts, single


def vector_field(model: ModelSpec, x) -> np.ndarray:
    """Time derivative of the state; accepts one point ``(d,)`` or rows ``(n, d)``."""
    pts, single = _as_points(model, x)
    out = kernels.rhs_batch(
        _MODEL_CODES[model.model_id], np.asarray(model.params), pts
    )
    return out[0] if single else out


def measure(model: ModelSpec, x) -> np.ndarray:
    """Project states onto the measured coordinates."""
    pts, single = _as_points(model, x)
    out = pts[:, list(model.measured_dims)]
    return out[0] if single else out


def integrate_points(
    model: ModelSpec,
    x0: np.ndarray,
    t0: float,
    t1: float,
    cfg: IntegratorConfig = IntegratorConfig(),
) -> np.ndarray:
    """Propagate each row of ``x0`` through the model ODE from t0 to t1."""
    pts, single = _as_points(model, x0)
    if t1 < t0:
        raise ValueError(f"t1 must be >= t0, got {t0} -> {t1}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("initial states must be finite")
    if t1 == t0:
        out = pts.copy()
        return out[0] if single else out
    out, status = kernels.integrate_states(
        _MODEL_CODES[model.model_id],
        np.asarray(model.params),
        pts,
        t0,
        t1,
        cfg.rel_tol,
        cfg.abs_tol,
        cfg.max_step,
    )
    if np.any(status != kernels.OK):
        bad = np.flatnonzero(status != kernels.OK)
        reasons = {int(i): kernels.STATUS_LABELS[int(status[i])] for i in bad[:5]}
        raise IntegrationError(
            f"integration of {model.model_id} over [{t0}, {t1}] failed for "
            f"{bad.size} of {pts.shape[0]} states; first failures {reasons}"
        )
    return out[0] if single else out


def integrate(
    model: ModelSpec,
    x0,
    t0: float,
    t1: float,
    cfg: IntegratorConfig = IntegratorConfig(),
) -> np.ndarray:
    """Propagate a single state vector; see :func:`integrate_points`."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1:
        raise ValueError("integrate expects a single state vector")
    return integrate_points(model, x0[None, :], t0, t1, cfg)[0]
