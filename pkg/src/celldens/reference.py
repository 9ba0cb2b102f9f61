"""Ground-truth population simulation and synthetic snapshot measurements.

The reference solution propagates a sample of the initial number density
function along single-cell trajectories (the state space is reparameterized
along trajectories, so no spatial discretization is involved and the cell
count is conserved exactly).  Snapshots mimic flow cytometry: a random
subsample of cells, measured coordinates only, optional per-cell noise, and
a Gaussian mixture fitted to the measured values.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import gmd as gmdlib
from .errors import IntegrationError
from .gmd import GMD
from .models import IntegratorConfig, ModelSpec, integrate_points, measure

NOISE_NONE = "none"
NOISE_ADDITIVE = "additive_gaussian"
NOISE_MULT_LOGNORMAL = "multiplicative_lognormal"


@dataclass(frozen=True)
class NoiseModel:
    """Single-cell measurement noise: none, additive Gaussian, or log-normal."""

    kind: str = NOISE_NONE
    variance: float = 0.0

    def __post_init__(self):
        if self.kind not in (NOISE_NONE, NOISE_ADDITIVE, NOISE_MULT_LOGNORMAL):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.variance < 0:
            raise ValueError("noise variance must be >= 0")

    def apply(self, meas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == NOISE_NONE or self.variance == 0.0:
            return meas.copy()
        std = np.sqrt(self.variance)
        if self.kind == NOISE_ADDITIVE:
            return meas + rng.normal(0.0, std, size=meas.shape)
        return meas * np.exp(rng.normal(0.0, std, size=meas.shape))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "variance": self.variance}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(d.get("kind", NOISE_NONE), d.get("variance", 0.0))


@dataclass
class CellEnsemble:
    """All simulated cells at one time instant."""

    time: float
    cells: np.ndarray  # (n_cells, d)
    model: ModelSpec


@dataclass
class SnapshotEntry:
    time: float
    raw: np.ndarray  # (n_meas, d_y) measured values after noise
    fitted: GMD  # measured-dim density, total_count = n_meas


@dataclass
class SnapshotSeries:
    """Timestamped measured samples plus their fitted measurement densities."""

    model_id: str
    noise: NoiseModel
    entries: list[SnapshotEntry] = field(default_factory=list)

    def __post_init__(self):
        times = [e.time for e in self.entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("snapshot times must be strictly increasing")

    @property
    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.entries])

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "noise": self.noise.to_dict(),
            "entries": [
                {"t": e.time, "raw": e.raw.tolist(), "gmd": e.fitted.to_dict()}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SnapshotSeries":
        entries = [
            SnapshotEntry(e["t"], np.asarray(e["raw"], dtype=np.float64), GMD.from_dict(e["gmd"]))
            for e in d["entries"]
        ]
        return cls(d["model_id"], NoiseModel.from_dict(d["noise"]), entries)

    def raw_csv(self) -> str:
        """Measured values as delimited text with a 'time,dim0[,dim1...]' header."""
        d_y = self.entries[0].raw.shape[1] if self.entries else 1
        buf = io.StringIO()
        buf.write("time," + ",".join(f"dim{i}" for i in range(d_y)) + "\n")
        for e in self.entries:
            for row in e.raw:
                buf.write(f"{e.time!r}," + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def _draw_initial(n0: GMD, n_cells: int, rng: np.random.Generator) -> np.ndarray:
    """Sample initial cells, redrawing the rare draws with negative coordinates."""
    cells = gmdlib.sample(n0, n_cells, rng)
    for _ in range(100):
        bad = np.any(cells < 0.0, axis=1)
        if not bad.any():
            return cells
        cells[bad] = gmdlib.sample(n0, int(bad.sum()), rng)
    raise ValueError("initial density places too much mass at negative coordinates")


def simulate_reference(
    model: ModelSpec,
    n0: GMD,
    n_cells: int,
    times,
    rng: np.random.Generator,
    integ: IntegratorConfig = IntegratorConfig(),
) -> list[CellEnsemble]:
    """Propagate ``n_cells`` draws from ``n0`` to every requested time."""
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a strictly increasing grid")
    if n_cells < 1:
        raise ValueError("need n_cells >= 1")
    if n0.dim != model.dim:
        raise ValueError("initial density dimension does not match the model")

    cells = _draw_initial(n0, n_cells, rng)
    out = []
    t_prev = times[0]
    if times[0] != 0.0:
        cells = _propagate(model, cells, 0.0, times[0], integ)
    out.append(CellEnsemble(float(times[0]), cells.copy(), model))
    for t in times[1:]:
        cells = _propagate(model, cells, t_prev, float(t), integ)
        out.append(CellEnsemble(float(t), cells.copy(), model))
        t_prev = float(t)
    return out


def _propagate(model, cells, t0, t1, integ):
    try:
        return integrate_points(model, cells, t0, t1, integ)
    except IntegrationError as exc:
        raise IntegrationError(f"reference propagation to t={t1} failed: {exc}") from exc


def take_snapshot(
    ens: CellEnsemble,
    n_meas: int,
    noise: NoiseModel,
    rng: np.random.Generator,
) -> np.ndarray:
    """Measure a uniform subsample (without replacement) of the population."""
    n = ens.cells.shape[0]
    if n_meas > n:
        raise ValueError(f"cannot measure {n_meas} of {n} cells")
    idx = rng.choice(n, size=n_meas, replace=False)
    meas = measure(ens.model, ens.cells[idx])
    return noise.apply(meas, rng)


def fit_measurement_density(
    raw: np.ndarray,
    n_gmd: int,
    rng: np.random.Generator,
    em_max_iter: int = 500,
) -> GMD:
    """Fit the measured density function to one snapshot's raw values."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    return gmdlib.fit_em(raw, n_gmd, em_max_iter, rng, total_count=raw.shape[0])


def build_snapshot_series(
    ensembles: list[CellEnsemble],
    n_meas: int,
    noise: NoiseModel,
    n_gmd: int,
    rng: np.random.Generator,
    em_max_iter: int = 500,
) -> SnapshotSeries:
    """Snapshot every ensemble of a reference simulation."""
    entries = []
    for ens in ensembles:
        raw = take_snapshot(ens, n_meas, noise, rng)
        fitted = fit_measurement_density(raw, n_gmd, rng, em_max_iter)
        entries.append(SnapshotEntry(ens.time, raw, fitted))
    return SnapshotSeries(ensembles[0].model.model_id, noise, entries)


def reference_kde(ens: CellEnsemble, scale: float = 1.0) -> GMD:
    """Kernel density estimate of the reference NDF (Scott's rule, equal weights)."""
    cells = ens.cells
    n = cells.shape[0]
    bw = gmdlib.scotts_bandwidth(cells, scale)
    return GMD(
        np.full(n, 1.0 / n),
        cells.copy(),
        np.tile(bw, (n, 1, 1)),
        total_count=n,
    )
