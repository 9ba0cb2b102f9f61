"""L1 marginal-error metric and run aggregation.

All error computations act on count-normalized densities (unit mass), so
values are comparable across population sizes and bounded by 2.  Estimates
may be Gaussian mixtures or grid NDFs; the reference may additionally be a
cell ensemble, in which case its marginal is a Scott's-rule kernel density
estimate over all reference cells.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import gmd as gmdlib
from .gmd import GMD
from .gridpf import GridNDF, build_measurement_matrix
from .reference import CellEnsemble, reference_kde


@dataclass(frozen=True)
class QuadratureConfig:
    """Fixed trapezoidal rule: interval from the supports, >= 2000 nodes."""

    n_nodes: int = 2001
    pad_bandwidths: float = 4.0

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("need at least 2 quadrature nodes")


@dataclass
class ErrorSeries:
    """Per-time L1 error of one estimator's marginal in one run."""

    times: np.ndarray
    values: np.ndarray
    estimator: str
    dim_name: str
    seed_key: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must align")
        if np.any(self.values < 0):
            raise ValueError("L1 errors cannot be negative")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


@dataclass
class AggregateSeries:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_runs: int


def _marginal_1d(obj, dim: int, quad: QuadratureConfig):
    """(lo, hi, density callable) for one marginal of a supported density."""
    if isinstance(obj, CellEnsemble):
        kde = reference_kde(obj)
        h = float(np.sqrt(kde.covs[0, dim, dim]))
        coords = obj.cells[:, dim]
        lo = float(coords.min() - quad.pad_bandwidths * h)
        hi = float(coords.max() + quad.pad_bandwidths * h)
        marg = gmdlib.marginalize(kde, [dim])
        return lo, hi, lambda x: gmdlib.eval_points(marg, x[:, None])
    if isinstance(obj, GMD):
        marg = gmdlib.marginalize(obj, [dim])
        sig = np.sqrt(np.einsum("lii->li", marg.covs)[:, 0])
        lo = float(np.min(marg.means[:, 0] - 8.0 * sig))
        hi = float(np.max(marg.means[:, 0] + 8.0 * sig))
        return lo, hi, lambda x: gmdlib.eval_points(marg, x[:, None])
    if isinstance(obj, GridNDF):
        grid = obj.grid
        C = build_measurement_matrix(grid, [dim])
        vals = C @ obj.values
        centers = grid.axis_centers(dim)
        lo, hi = grid.lows[dim], grid.highs[dim]
        w = grid.widths[dim]

        def density(x, centers=centers, vals=vals, lo=lo, hi=hi, w=w):
            out = np.zeros_like(x)
            inside = (x >= lo) & (x <= hi)
            j = np.clip(((x[inside] - lo) / w).astype(int), 0, len(centers) - 1)
            out[inside] = vals[j]
            return out

        return float(lo), float(hi), density
    raise TypeError(f"unsupported density representation {type(obj).__name__}")


def reference_quadrature(
    reference, dim: int, quad: QuadratureConfig = QuadratureConfig()
):
    """Quadrature nodes and reference marginal values, reusable across estimates.

    For a cell ensemble the interval is the reference support (cell min/max
    padded by ``pad_bandwidths`` kernel bandwidths), which covers every
    sensible estimate.
    """
    if isinstance(reference, CellEnsemble) and reference.cells.shape[0] == 0:
        raise ValueError("reference ensemble is empty")
    lo, hi, f_ref = _marginal_1d(reference, dim, quad)
    x = np.linspace(lo, hi, quad.n_nodes)
    return x, f_ref(x)


def l1_against_reference_values(estimate, dim: int, x, ref_values) -> float:
    """L1 distance of an estimate marginal against precomputed reference values."""
    _, _, f_est = _marginal_1d(estimate, dim, QuadratureConfig(n_nodes=len(x)))
    return float(np.trapezoid(np.abs(f_est(x) - ref_values), x))


def l1_marginal_error(
    estimate,
    reference,
    dim: int,
    quad: QuadratureConfig = QuadratureConfig(),
) -> float:
    """Trapezoidal L1 distance between two marginal densities.

    For ensemble references the quadrature interval is the reference support
    (cell min/max padded by ``pad_bandwidths`` kernel bandwidths).  For
    density-density comparisons the union of both supports is used, keeping
    the metric symmetric.
    """
    if isinstance(reference, CellEnsemble):
        x, ref_values = reference_quadrature(reference, dim, quad)
        return l1_against_reference_values(estimate, dim, x, ref_values)
    lo_e, hi_e, f_est = _marginal_1d(estimate, dim, quad)
    lo_r, hi_r, f_ref = _marginal_1d(reference, dim, quad)
    lo, hi = min(lo_e, lo_r), max(hi_e, hi_r)
    x = np.linspace(lo, hi, quad.n_nodes)
    return float(np.trapezoid(np.abs(f_est(x) - f_ref(x)), x))


def average_runs(series: list[ErrorSeries]) -> AggregateSeries:
    """Pointwise mean and sample standard deviation across runs."""
    if not series:
        raise ValueError("need at least one error series")
    times = series[0].times
    for s in series[1:]:
        if s.times.shape != times.shape or not np.array_equal(s.times, times):
            raise ValueError("all runs must share one time grid")
    stack = np.stack([s.values for s in series])
    mean = stack.mean(axis=0)
    std = stack.std(axis=0, ddof=1) if len(series) > 1 else np.zeros_like(mean)
    return AggregateSeries(times.copy(), mean, std, len(series))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_error_series_csv(s: ErrorSeries, header_fields: dict | None = None) -> str:
    fields = {"estimator": s.estimator, "marginal": s.dim_name, "seed": s.seed_key}
    if header_fields:
        fields = {**header_fields, **fields}
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in fields.items()) + "\n")
    buf.write("time,value\n")
    for t, v in zip(s.times, s.values):
        buf.write(f"{_fmt(t)},{_fmt(v)}\n")
    return buf.getvalue()


def write_aggregate_csv(
    agg: AggregateSeries, header_fields: dict | None = None
) -> str:
    buf = io.StringIO()
    if header_fields:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in header_fields.items()) + "\n")
    buf.write("time,mean,std\n")
    for t, m, s in zip(agg.times, agg.mean, agg.std):
        buf.write(f"{_fmt(t)},{_fmt(m)},{_fmt(s)}\n")
    return buf.getvalue()
