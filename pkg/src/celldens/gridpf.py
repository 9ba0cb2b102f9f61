"""Grid-based baseline estimator.

The transport equation for the NDF is discretized with a donor-cell upwind
finite-volume scheme on a rectangular grid, turning it into a large sparse
linear ODE system.  A bootstrap particle filter runs on top: each particle
is an entire discretized NDF, propagated with the shared adaptive
integrator, jittered by multiplicative log-space process noise, weighted by
a Gaussian residual likelihood against the measured marginal, and
regularized-resampled in log space when the effective particle count
degenerates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import gmd as gmdlib
from . import kernels
from .errors import BoundaryFluxWarning, IntegrationError
from .gmd import DENSITY_FLOOR, GMD
from .models import IntegratorConfig, ModelSpec, vector_field

_LOG_CLIP = 700.0


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid; nodes are cell centers, flattened in C order."""

    lows: tuple[float, ...]
    highs: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        lows = tuple(float(v) for v in self.lows)
        highs = tuple(float(v) for v in self.highs)
        counts = tuple(int(c) for c in self.counts)
        if not (len(lows) == len(highs) == len(counts)):
            raise ValueError("lows, highs and counts must have equal length")
        for lo, hi, c in zip(lows, highs, counts):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"invalid grid bounds [{lo}, {hi})")
            if c < 2:
                raise ValueError("need at least 2 nodes per dimension")
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def widths(self) -> np.ndarray:
        return (np.array(self.highs) - np.array(self.lows)) / np.array(self.counts)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.counts))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    def axis_centers(self, dim: int) -> np.ndarray:
        w = self.widths[dim]
        return self.lows[dim] + w * (np.arange(self.counts[dim]) + 0.5)

    def center_points(self) -> np.ndarray:
        """All node centers as rows, in flattening order."""
        axes = [self.axis_centers(a) for a in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_dict(self) -> dict:
        return {
            "lows": list(self.lows),
            "highs": list(self.highs),
            "counts": list(self.counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(tuple(d["lows"]), tuple(d["highs"]), tuple(d["counts"]))


@dataclass
class GridNDF:
    """NDF values per node (density per unit volume, unit total mass)."""

    values: np.ndarray
    grid: Grid

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def normalized(self) -> "GridNDF":
        m = self.mass()
        if m <= 0:
            raise ValueError("cannot normalize a zero-mass grid NDF")
        return GridNDF(self.values / m, self.grid)


@dataclass(frozen=True)
class PFConfig:
    """Particle-filter tuning; defaults follow the two-dimensional benchmark."""

    n_particles: int = 120
    resample_threshold: float = 0.1  # fraction of n_particles on N_eff
    process_noise_std: float = 0.05  # log-space std per step
    meas_noise_std: float = 0.05  # residual scale in density units
    resample_bw_scale: float = 1.0  # Scott factor for the log-space kernel
    init_jitter_std: float = 0.1

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if not 0.0 < self.resample_threshold <= 1.0:
            raise ValueError("resample_threshold must be in (0, 1]")
        for name in ("process_noise_std", "meas_noise_std", "init_jitter_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.meas_noise_std == 0:
            raise ValueError("meas_noise_std must be positive")


@dataclass
class PFState:
    particles: np.ndarray  # (n_particles, n_nodes)
    weights: np.ndarray  # (n_particles,)
    time: float
    grid: Grid
    n_eff: float = 0.0
    resampled: bool = False


def build_advection_operator(model: ModelSpec, grid: Grid) -> sp.csr_matrix:
    """Donor-cell upwind discretization of -div(n f) with zero boundary fluxes.

    Volume-weighted column sums vanish, so the semi-discrete system conserves
    total mass exactly; outward-pointing velocities at the boundary are
    clamped (flux zero) and reported via ``BoundaryFluxWarning``.
    """
    if grid.dim != model.dim:
        raise ValueError("grid dimension does not match the model")
    counts = grid.counts
    widths = grid.widths
    n = grid.n_nodes
    centers = [grid.axis_centers(a) for a in range(grid.dim)]
    idx = np.arange(n).reshape(counts)

    rows, cols, vals = [], [], []
    for a in range(grid.dim):
        if counts[a] < 2:
            continue
        # interior faces along axis a: between cells i and i+1
        sel_l = [slice(None)] * grid.dim
        sel_l[a] = slice(0, counts[a] - 1)
        left = idx[tuple(sel_l)].ravel()
        sel_r = [slice(None)] * grid.dim
        sel_r[a] = slice(1, counts[a])
        right = idx[tuple(sel_r)].ravel()

        axes = list(centers)
        axes[a] = grid.lows[a] + widths[a] * np.arange(1, counts[a])
        mesh = np.meshgrid(*axes, indexing="ij")
        face_pts = np.stack([m.ravel() for m in mesh], axis=1)
        u = vector_field(model, face_pts)[:, a]
        up = np.maximum(u, 0.0)
        um = np.minimum(u, 0.0)
        w = widths[a]

        rows.append(left)
        cols.append(left)
        vals.append(-up / w)
        rows.append(right)
        cols.append(left)
        vals.append(up / w)
        rows.append(left)
        cols.append(right)
        vals.append(-um / w)
        rows.append(right)
        cols.append(right)
        vals.append(um / w)

        # boundary faces carry no flux; warn when the field points outward
        for side, bound in ((0, grid.lows[a]), (1, grid.highs[a])):
            axes_b = list(centers)
            axes_b[a] = np.array([bound])
            mesh_b = np.meshgrid(*axes_b, indexing="ij")
            pts_b = np.stack([m.ravel() for m in mesh_b], axis=1)
            ub = vector_field(model, pts_b)[:, a]
            outward = (ub < 0) if side == 0 else (ub > 0)
            if np.any(np.abs(ub[outward]) > 1e-12):
                warnings.warn(
                    f"velocity points outward at the "
                    f"{'lower' if side == 0 else 'upper'} boundary of axis {a}; "
                    "flux clamped to zero",
                    BoundaryFluxWarning,
                    stacklevel=2,
                )

    if rows:
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        ).tocsr()
    else:  # zero field everywhere
        mat = sp.csr_matrix((n, n))
    mat.sum_duplicates()
    return mat


def build_measurement_matrix(grid: Grid, measured_dims) -> sp.csr_matrix:
    """Marginalization operator onto the sub-grid of the kept dimensions."""
    kept = [int(i) for i in measured_dims]
    if len(kept) == 0 or len(set(kept)) != len(kept):
        raise ValueError("measured_dims must be a nonempty set")
    if any(i < 0 or i >= grid.dim for i in kept):
        raise ValueError(f"measured_dims {kept} out of range")
    dropped = [a for a in range(grid.dim) if a not in kept]
    weight = float(np.prod([grid.widths[a] for a in dropped])) if dropped else 1.0

    idx = np.arange(grid.n_nodes).reshape(grid.counts)
    # move kept axes to the front, in the order given
    order = kept + dropped
    idx_perm = np.transpose(idx, order)
    m = int(np.prod([grid.counts[a] for a in kept]))
    flat = idx_perm.reshape(m, -1)
    rows = np.repeat(np.arange(m), flat.shape[1])
    cols = flat.ravel()
    vals = np.full(cols.size, weight)
    return sp.coo_matrix((vals, (rows, cols)), shape=(m, grid.n_nodes)).tocsr()


def propagate_particle(
    A: sp.csr_matrix,
    ndf: GridNDF,
    dt: float,
    process_noise_std: float,
    rng: np.random.Generator,
    integ: IntegratorConfig = IntegratorConfig(),
) -> GridNDF:
    """Advance one particle: linear transport, log-space noise, renormalize."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    values, status = kernels.integrate_csr(
        A, ndf.values, 0.0, dt, integ.rel_tol, integ.abs_tol, integ.max_step
    )
    if status != kernels.OK:
        raise IntegrationError(
            f"grid transport over dt={dt} failed: {kernels.STATUS_LABELS[status]}"
        )
    values = np.maximum(values, 0.0)
    if process_noise_std > 0:
        values = values * np.exp(
            rng.normal(0.0, process_noise_std, size=values.shape)
        )
    return GridNDF(values, ndf.grid).normalized()


def log_likelihood(
    particle: GridNDF, C: sp.csr_matrix, measured_on_grid: np.ndarray, meas_noise_std: float
) -> float:
    """Log of the Gaussian mean-squared-residual likelihood."""
    r = C @ particle.values - measured_on_grid
    return float(-0.5 * np.mean(r**2) / meas_noise_std**2)


def likelihood(
    particle: GridNDF, C: sp.csr_matrix, measured_on_grid: np.ndarray, meas_noise_std: float
) -> float:
    """Strictly positive residual likelihood exp(-0.5 * mean(r^2) / std^2)."""
    return float(
        np.exp(log_likelihood(particle, C, measured_on_grid, meas_noise_std))
    )


def effective_particles(weights: np.ndarray) -> float:
    """Degeneracy diagnostic 1 / sum(w^2) for normalized weights."""
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w**2))


def _systematic_indices(weights: np.ndarray, n: int, rng: np.random.Generator):
    positions = (np.arange(n) + rng.uniform()) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions)


def regularized_resample(
    state: PFState, cfg: PFConfig, rng: np.random.Generator
) -> PFState:
    """Systematic resampling plus log-space kernel jitter; weights go uniform.

    The jitter bandwidth follows Scott's rule over the log-transformed
    particle ensemble, keeping every resampled NDF strictly positive.
    """
    if not np.any(state.weights > 0):
        raise ValueError("cannot resample from all-zero weights")
    n = state.particles.shape[0]
    logp_all = np.log(np.maximum(state.particles, DENSITY_FLOOR))
    h = gmdlib.scott_bandwidth_vector(logp_all, cfg.resample_bw_scale)
    idx = _systematic_indices(state.weights, n, rng)
    logp = logp_all[idx]
    noise = rng.standard_normal(logp.shape) * h[None, :]
    values = np.exp(np.clip(logp + noise, -_LOG_CLIP, _LOG_CLIP))
    values /= values.sum(axis=1, keepdims=True) * state.grid.cell_volume
    return replace(
        state,
        particles=values,
        weights=np.full(n, 1.0 / n),
        resampled=True,
    )


def posterior_mean(state: PFState) -> GridNDF:
    """Weighted particle average, renormalized to unit mass."""
    values = state.weights @ state.particles
    return GridNDF(values, state.grid).normalized()


def pf_init(
    n0_hat: GMD, grid: Grid, cfg: PFConfig, rng: np.random.Generator
) -> PFState:
    """Discretize the initial estimate and jitter it into a particle ensemble."""
    if n0_hat.dim != grid.dim:
        raise ValueError("initial estimate dimension does not match the grid")
    base = gmdlib.eval_points(n0_hat, grid.center_points())
    base = np.maximum(base, 0.0)
    total = base.sum() * grid.cell_volume
    if total <= 0:
        raise ValueError("initial estimate has no mass on the grid")
    base /= total
    particles = np.tile(base, (cfg.n_particles, 1))
    if cfg.init_jitter_std > 0:
        particles = particles * np.exp(
            rng.normal(0.0, cfg.init_jitter_std, size=particles.shape)
        )
    particles /= particles.sum(axis=1, keepdims=True) * grid.cell_volume
    return PFState(
        particles=particles,
        weights=np.full(cfg.n_particles, 1.0 / cfg.n_particles),
        time=0.0,
        grid=grid,
        n_eff=float(cfg.n_particles),
    )


def measured_density_on_grid(measured: GMD, grid: Grid, measured_dims) -> np.ndarray:
    """Evaluate the fitted measurement density at the measured-axis centers."""
    kept = [int(i) for i in measured_dims]
    axes = [grid.axis_centers(a) for a in kept]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return gmdlib.eval_points(measured, pts)


def pf_update(
    state: PFState,
    C: sp.csr_matrix,
    measured_on_grid: np.ndarray,
    cfg: PFConfig,
    rng: np.random.Generator,
) -> PFState:
    """Bootstrap weight update plus threshold-triggered regularized resampling."""
    resid = (C @ state.particles.T).T - measured_on_grid[None, :]
    loglik = -0.5 * np.mean(resid**2, axis=1) / cfg.meas_noise_std**2
    logw = np.log(np.maximum(state.weights, DENSITY_FLOOR)) + loglik
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    n_eff = effective_particles(w)
    out = replace(state, weights=w, n_eff=n_eff, resampled=False)
    if n_eff < cfg.resample_threshold * cfg.n_particles:
        out = regularized_resample(out, cfg, rng)
        out = replace(out, n_eff=n_eff, resampled=True)
    return out


def pf_step(
    state: PFState,
    A: sp.csr_matrix,
    C: sp.csr_matrix,
    measured: GMD,
    dt: float,
    cfg: PFConfig,
    rng: np.random.Generator,
    integ: IntegratorConfig = IntegratorConfig(),
    measured_dims=None,
) -> PFState:
    """One filter cycle: propagate all particles, then assimilate the snapshot."""
    grid = state.grid
    particles = np.empty_like(state.particles)
    for i in range(state.particles.shape[0]):
        particles[i] = propagate_particle(
            A,
            GridNDF(state.particles[i], grid),
            dt,
            cfg.process_noise_std,
            rng,
            integ,
        ).values
    moved = replace(state, particles=particles, time=state.time + dt)
    dims = list(range(grid.dim)) if measured_dims is None else measured_dims
    y = measured_density_on_grid(measured, grid, dims)
    return pf_update(moved, C, y, cfg, rng)
