"""Characteristics-based density estimator.

Candidate cells sampled from the estimated initial NDF carry a small
covariance; each is represented by a symmetric sigma-point set so a full
mean/covariance pair survives the nonlinear trajectory propagation.  At
every measurement time the candidates' predicted outputs are (a) fitted
with a small Gaussian mixture and compared against the measured density via
a Monte Carlo KL divergence, and (b) evaluated on the measured density to
reweight the candidates.  The posterior NDF estimate is a kernel mixture
centered on the candidates; when the KL divergence exceeds a threshold a
fresh candidate set is drawn from that posterior and the per-candidate
covariance is reset.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import gmd as gmdlib
from .errors import IntegrationError, LikelihoodUnderflowWarning
from .gmd import GMD, DENSITY_FLOOR
from .models import IntegratorConfig, ModelSpec, integrate_points, measure


@dataclass(frozen=True)
class SigmaWeights:
    """Mean and covariance combination weights of a symmetric sigma-point set."""

    mean_weights: np.ndarray
    cov_weights: np.ndarray


@dataclass(frozen=True)
class CharConfig:
    """Tuning parameters of the estimator (per benchmark, see shipped configs)."""

    n_cand: int
    d_kl_max: float
    bw_scale: float
    w0: float
    n_gmd: int
    em_max_iter: int

    def __post_init__(self):
        if self.n_cand < 1:
            raise ValueError("need n_cand >= 1")
        if self.d_kl_max <= 0:
            raise ValueError("need d_kl_max > 0")
        if self.bw_scale <= 0:
            raise ValueError("need bw_scale > 0")
        if self.w0 <= 0:
            raise ValueError("need w0 > 0")
        if self.n_gmd < 1 or self.em_max_iter < 1:
            raise ValueError("need n_gmd >= 1 and em_max_iter >= 1")


@dataclass
class CharState:
    """Estimator state: stacked candidate arrays plus the current densities."""

    time: float
    means: np.ndarray  # (n_cand, d)
    covs: np.ndarray  # (n_cand, d, d)
    sigmas: np.ndarray  # (n_cand, 1 + 2 d, d)
    weights: SigmaWeights
    outputs: np.ndarray  # (n_cand, d_y)
    alphas: np.ndarray  # (n_cand,)
    predicted_output_gmd: GMD
    posterior_gmd: GMD | None = None
    last_kl: float = np.inf
    resampled: bool = False
    ode_solves: int = 0
    ode_solves_last_predict: int = 0

    @property
    def n_cand(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def sigma_points(mean, cov, kappa: float | None = None):
    """Symmetric unscented set for (mean, cov); returns (points, SigmaWeights).

    Classic parameterization: kappa defaults to 3 - d, mean and covariance
    weights coincide.  The weighted points reproduce the pair exactly.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    d = mean.size
    if kappa is None:
        kappa = 3.0 - d
    try:
        scaled = np.linalg.cholesky((d + kappa) * cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "covariance is not positive definite; cannot build sigma points"
        ) from exc
    pts = np.empty((1 + 2 * d, d))
    pts[0] = mean
    pts[1 : d + 1] = mean + scaled.T
    pts[d + 1 :] = mean - scaled.T
    wm = np.full(1 + 2 * d, 1.0 / (2.0 * (d + kappa)))
    wm[0] = kappa / (d + kappa)
    return pts, SigmaWeights(wm, wm.copy())


def _sigma_sets_shared_cov(means: np.ndarray, cov: np.ndarray, kappa: float):
    """Sigma sets for many candidates sharing one covariance."""
    n, d = means.shape
    try:
        scaled = np.linalg.cholesky((d + kappa) * cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "candidate covariance is not positive definite"
        ) from exc
    offsets = np.zeros((1 + 2 * d, d))
    offsets[1 : d + 1] = scaled.T
    offsets[d + 1 :] = -scaled.T
    return means[:, None, :] + offsets[None, :, :]


def _as_cov(w0, d: int) -> np.ndarray:
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.ndim == 0:
        return float(w0) * np.eye(d)
    return np.atleast_2d(w0)


def _measured_outputs(model: ModelSpec, sigmas: np.ndarray, wm: np.ndarray):
    """Weighted measurement of each candidate's sigma set: (n_cand, d_y)."""
    meas = sigmas[:, :, list(model.measured_dims)]
    return np.einsum("e,ned->nd", wm, meas)


def _fit_output_gmd(outputs, cfg: CharConfig, rng, total_count: float) -> GMD:
    return gmdlib.fit_em(
        outputs, cfg.n_gmd, cfg.em_max_iter, rng, total_count=total_count
    )


def init(
    n0_hat: GMD,
    model: ModelSpec,
    cfg: CharConfig,
    rng: np.random.Generator,
    t0: float = 0.0,
) -> CharState:
    """Sample the candidate set from the initial estimate and prime its outputs."""
    d = model.dim
    d_y = len(model.measured_dims)
    if n0_hat.dim != d:
        raise ValueError("initial estimate dimension does not match the model")
    if cfg.n_cand < cfg.n_gmd * (d_y + 1):
        raise ValueError("n_cand too small for the output-density EM fit")

    kappa = 3.0 - d
    means = gmdlib.sample(n0_hat, cfg.n_cand, rng)
    w0 = _as_cov(cfg.w0, d)
    covs = np.tile(w0, (cfg.n_cand, 1, 1))
    sigmas = _sigma_sets_shared_cov(means, w0, kappa)
    _, weights = sigma_points(means[0], w0, kappa)
    outputs = _measured_outputs(model, sigmas, weights.mean_weights)
    pred = _fit_output_gmd(outputs, cfg, rng, n0_hat.total_count)
    return CharState(
        time=float(t0),
        means=means,
        covs=covs,
        sigmas=sigmas,
        weights=weights,
        outputs=outputs,
        alphas=np.full(cfg.n_cand, 1.0 / cfg.n_cand),
        predicted_output_gmd=pred,
    )


def predict(
    state: CharState,
    model: ModelSpec,
    t_next: float,
    cfg: CharConfig,
    integ: IntegratorConfig,
    rng: np.random.Generator,
) -> CharState:
    """Propagate every sigma point through the single-cell flow to ``t_next``.

    Candidate means, covariances and predicted outputs are recombined from
    the propagated sets, and the predicted output density is refitted.
    """
    if t_next <= state.time:
        raise ValueError(f"t_next must exceed state time {state.time}")
    n, d = state.means.shape
    s = state.sigmas.shape[1]
    flat = state.sigmas.reshape(n * s, d)
    try:
        prop = integrate_points(model, flat, state.time, t_next, integ)
    except IntegrationError as exc:
        raise IntegrationError(
            f"sigma-point propagation to t={t_next} failed "
            f"(candidates hold {s} points each): {exc}"
        ) from exc
    sigmas = prop.reshape(n, s, d)
    wm = state.weights.mean_weights
    wc = state.weights.cov_weights
    means = np.einsum("e,ned->nd", wm, sigmas)
    diff = sigmas - means[:, None, :]
    covs = np.einsum("e,nei,nej->nij", wc, diff, diff)
    outputs = _measured_outputs(model, sigmas, wm)
    pred = _fit_output_gmd(
        outputs, cfg, rng, state.predicted_output_gmd.total_count
    )
    return replace(
        state,
        time=float(t_next),
        means=means,
        covs=covs,
        sigmas=sigmas,
        outputs=outputs,
        predicted_output_gmd=pred,
        ode_solves=state.ode_solves + n * s,
        ode_solves_last_predict=n * s,
    )


def update(state: CharState, measured: GMD, cfg: CharConfig) -> CharState:
    """Reweight candidates on the measured density and build the posterior NDF.

    Proportions are importance-normalized: the measured density at each
    candidate's predicted output, divided by the predicted output density
    there.  The division makes the combination idempotent: once the
    candidate distribution matches the measured density the proportions are
    uniform and repeated updates no longer contract the candidate spread.
    """
    if measured.dim != state.outputs.shape[1]:
        raise ValueError("measured density dimension does not match outputs")
    num = gmdlib.eval_points(measured, state.outputs)
    den = gmdlib.eval_points(state.predicted_output_gmd, state.outputs)
    if np.all(num <= DENSITY_FLOOR):
        warnings.warn(
            "all candidate outputs fell below the measured density floor; "
            "falling back to uniform proportions",
            LikelihoodUnderflowWarning,
            stacklevel=2,
        )
        alphas = np.full(state.n_cand, 1.0 / state.n_cand)
    else:
        raw = np.maximum(num, DENSITY_FLOOR) / np.maximum(den, DENSITY_FLOOR)
        alphas = raw / raw.sum()
    bw = gmdlib.scotts_bandwidth(state.means, cfg.bw_scale)
    posterior = GMD(
        alphas,
        state.means.copy(),
        np.tile(bw, (state.n_cand, 1, 1)),
        total_count=measured.total_count,
    )
    kl = gmdlib.kl_from_evals(den, num)
    return replace(state, alphas=alphas, posterior_gmd=posterior, last_kl=kl)


def maybe_resample(
    state: CharState,
    model: ModelSpec,
    cfg: CharConfig,
    rng: np.random.Generator,
) -> CharState:
    """Redraw the candidate set from the posterior when the KL threshold trips.

    On resampling every candidate covariance is reset to the initial
    uncertainty and the sigma sets, outputs and predicted output density are
    rebuilt; otherwise the state passes through untouched.
    """
    if state.posterior_gmd is None:
        raise RuntimeError("maybe_resample requires update to have run")
    if not state.last_kl > cfg.d_kl_max:
        return replace(state, resampled=False)

    d = state.dim
    kappa = 3.0 - d
    means = gmdlib.sample(state.posterior_gmd, state.n_cand, rng)
    w0 = _as_cov(cfg.w0, d)
    covs = np.tile(w0, (state.n_cand, 1, 1))
    sigmas = _sigma_sets_shared_cov(means, w0, kappa)
    outputs = _measured_outputs(model, sigmas, state.weights.mean_weights)
    pred = _fit_output_gmd(
        outputs, cfg, rng, state.predicted_output_gmd.total_count
    )
    return replace(
        state,
        means=means,
        covs=covs,
        sigmas=sigmas,
        outputs=outputs,
        alphas=np.full(state.n_cand, 1.0 / state.n_cand),
        predicted_output_gmd=pred,
        resampled=True,
    )


def estimate_marginal(state: CharState, dims) -> GMD:
    """Marginal of the current posterior NDF over the selected coordinates."""
    if state.posterior_gmd is None:
        raise RuntimeError("no posterior available before the first update")
    return gmdlib.marginalize(state.posterior_gmd, dims)
