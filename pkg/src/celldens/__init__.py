"""Online density estimation for heterogeneous cell populations.

Reconstructs the number density function (NDF) of a growing cell population
from flow-cytometry-style snapshot data.  Two estimators are provided: a
characteristics-based design propagating sampled candidate cells along
single-cell trajectories, and a grid-based bootstrap particle filter on a
finite-volume discretization of the underlying transport equation.
"""

from .backend import active_backend, set_backend
from .charest import CharConfig, CharState, SigmaWeights, sigma_points
from .config import ExperimentConfig, builtin_config, load_config
from .errors import (
    CellDensError,
    ConfigError,
    DensityError,
    FitError,
    IntegrationError,
)
from .gmd import (
    GMD,
    eval_points,
    fit_em,
    gaussian_kl_closed_form,
    kl_mc,
    marginalize,
    sample,
    scotts_bandwidth,
)
from .gridpf import Grid, GridNDF, PFConfig, PFState
from .metrics import AggregateSeries, ErrorSeries, average_runs, l1_marginal_error
from .models import (
    GENE_EXPR3D,
    GROWTH2D,
    IntegratorConfig,
    ModelSpec,
    integrate,
    integrate_points,
    measure,
    vector_field,
)
from .reference import (
    CellEnsemble,
    NoiseModel,
    SnapshotSeries,
    fit_measurement_density,
    reference_kde,
    simulate_reference,
    take_snapshot,
)

__version__ = "0.1.0"
