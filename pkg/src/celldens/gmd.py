"""Gaussian mixture densities: evaluation, sampling, marginals, EM, KL.

A ``GMD`` is the universal density representation of the package.  Component
weights always sum to one, so ``eval`` returns a probability density;
``total_count`` carries the population size the density is scaled by.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateClusterWarning, DensityError, FitError

REG_FLOOR = 1e-10
DENSITY_FLOOR = 1e-300

_LOG2PI = math.log(2.0 * math.pi)


def _floor_spd(covs: np.ndarray) -> np.ndarray:
    """Symmetrize and lift component covariances to eigenvalues >= REG_FLOOR."""
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    d = covs.shape[1]
    if d == 1 or not np.any(covs * (1.0 - np.eye(d))):
        # diagonal components: eigenvalues are the diagonal entries
        diag = np.einsum("lii->li", covs)
        if np.any(diag < REG_FLOOR):
            covs = covs.copy()
            np.einsum("lii->li", covs)[...] = np.maximum(diag, REG_FLOOR)
        return covs
    eig = np.linalg.eigvalsh(covs)
    low = eig[:, 0] < REG_FLOOR
    if np.any(low):
        deficit = REG_FLOOR - eig[low, 0]
        covs = covs.copy()
        covs[low] += deficit[:, None, None] * np.eye(d)
    return covs


@dataclass(frozen=True, eq=False)
class GMD:
    """Weighted sum of multivariate normals over the cell-state space."""

    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    covs: np.ndarray  # (k, d, d)
    total_count: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None] if w.size == mu.size else mu[None, :]
        cov = np.asarray(self.covs, dtype=np.float64)
        k, d = mu.shape
        cov = cov.reshape(k, d, d)
        if w.shape != (k,):
            raise ValueError(f"weights shape {w.shape} does not match {k} components")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("component weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"component weights must sum to 1, got {w.sum()!r}")
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(cov)):
            raise ValueError("means and covariances must be finite")
        if self.total_count < 0:
            raise ValueError("total_count must be >= 0")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", _floor_spd(cov))
        object.__setattr__(self, "total_count", float(self.total_count))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def single(cls, mean, cov, total_count: float = 1.0) -> "GMD":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        return cls(np.ones(1), mean[None, :], cov[None, :, :], total_count)

    @classmethod
    def isotropic(cls, mean, var: float, total_count: float = 1.0) -> "GMD":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls.single(mean, var * np.eye(mean.size), total_count)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "total_count": self.total_count,
            "components": [
                {
                    "weight": float(self.weights[l]),
                    "mean": self.means[l].tolist(),
                    "covariance": self.covs[l].tolist(),
                }
                for l in range(self.n_components)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GMD":
        comps = d["components"]
        return cls(
            np.array([c["weight"] for c in comps]),
            np.array([c["mean"] for c in comps]),
            np.array([c["covariance"] for c in comps]),
            d.get("total_count", 1.0),
        )


def _cholesky_components(g: GMD) -> np.ndarray:
    try:
        return np.linalg.cholesky(g.covs)
    except np.linalg.LinAlgError:
        for l in range(g.n_components):
            try:
                np.linalg.cholesky(g.covs[l])
            except np.linalg.LinAlgError as exc:
                raise DensityError(
                    f"component {l} has a non-positive-definite covariance"
                ) from exc
        raise DensityError("covariance factorization failed")  # pragma: no cover


def _is_diagonal(covs: np.ndarray) -> bool:
    d = covs.shape[1]
    if d == 1:
        return True
    off = covs * (1.0 - np.eye(d))
    return not np.any(off)


_EVAL_CHUNK = 16384


def eval_points(g: GMD, x) -> np.ndarray:
    """Density of the mixture at one point ``(d,)`` or rows ``(m, d)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != g.dim:
        raise ValueError(f"points have dim {pts.shape[1]}, mixture has {g.dim}")
    m = pts.shape[0]
    out = np.zeros(m)
    if g.dim == 1:
        var = g.covs[:, 0, 0]
        with np.errstate(divide="ignore"):
            head = np.log(g.weights) - 0.5 * (np.log(var) + _LOG2PI)
        half_inv = 0.5 / var
        mu = g.means[:, 0]
        x = pts[:, 0]
        for lo in range(0, m, _EVAL_CHUNK):
            c = x[lo : lo + _EVAL_CHUNK, None]
            out[lo : lo + _EVAL_CHUNK] = np.exp(
                head[None, :] - (c - mu[None, :]) ** 2 * half_inv[None, :]
            ).sum(axis=1)
    elif _is_diagonal(g.covs):
        var = np.einsum("lii->li", g.covs)  # (k, d)
        lognorm = -0.5 * (g.dim * _LOG2PI + np.log(var).sum(axis=1))  # (k,)
        for lo in range(0, m, _EVAL_CHUNK):
            chunk = pts[lo : lo + _EVAL_CHUNK]
            diff = chunk[:, None, :] - g.means[None, :, :]
            q = np.einsum("mld,ld->ml", diff**2, 1.0 / var)
            out[lo : lo + _EVAL_CHUNK] = np.exp(lognorm - 0.5 * q) @ g.weights
    else:
        chol = _cholesky_components(g)
        for l in range(g.n_components):
            L = chol[l]
            diff = pts - g.means[l]
            y = np.linalg.solve(L, diff.T)
            q = np.sum(y**2, axis=0)
            lognorm = -0.5 * g.dim * _LOG2PI - np.log(np.diag(L)).sum()
            out += g.weights[l] * np.exp(lognorm - 0.5 * q)
    return float(out[0]) if single else out


def sample(g: GMD, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. points from the mixture; deterministic given ``rng``."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    chol = _cholesky_components(g)
    comp = rng.choice(g.n_components, size=n, p=g.weights)
    z = rng.standard_normal((n, g.dim))
    return g.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


def marginalize(g: GMD, dims) -> "GMD":
    """Restrict the mixture to the selected coordinates (exact for Gaussians)."""
    dims = [int(i) for i in dims]
    if len(dims) == 0:
        raise ValueError("dims must be nonempty")
    if len(set(dims)) != len(dims) or any(i < 0 or i >= g.dim for i in dims):
        raise ValueError(f"dims {dims} invalid for a {g.dim}-dimensional mixture")
    sub = np.ix_(np.arange(g.n_components), dims, dims)
    return GMD(g.weights.copy(), g.means[:, dims], g.covs[sub], g.total_count)


def scotts_bandwidth(pts, scale: float = 1.0) -> np.ndarray:
    """Diagonal kernel covariance diag(h_i^2), h_i = scale * std_i * n^(-1/(d+4))."""
    h = scott_bandwidth_vector(pts, scale)
    return np.diag(h**2)


def scott_bandwidth_vector(pts, scale: float = 1.0) -> np.ndarray:
    """Per-dimension Scott bandwidths h_i (not squared)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    n, d = pts.shape
    if n < 2:
        raise ValueError("need at least 2 points for a bandwidth estimate")
    sigma = pts.std(axis=0, ddof=1)
    h = scale * sigma * n ** (-1.0 / (d + 4))
    return np.sqrt(np.maximum(h**2, REG_FLOOR))


def _mixture_logpdf(pts, weights, means, covs):
    """(m, k) component log densities plus log weights, and the row logsumexp."""
    m = pts.shape[0]
    k, d = means.shape
    if d == 1:
        var = covs[:, 0, 0]
        if np.any(var <= 0):
            raise DensityError("a component variance is not positive")
        q = (pts[:, 0][:, None] - means[None, :, 0]) ** 2 / var[None, :]
        logp = -0.5 * (q + np.log(var)[None, :] + _LOG2PI)
    else:
        logp = np.empty((m, k))
        for l in range(k):
            try:
                L = np.linalg.cholesky(covs[l])
            except np.linalg.LinAlgError as exc:
                raise DensityError(f"component {l} covariance is not PD") from exc
            y = np.linalg.solve(L, (pts - means[l]).T)
            logp[:, l] = (
                -0.5 * np.sum(y**2, axis=0)
                - np.log(np.diag(L)).sum()
                - 0.5 * d * _LOG2PI
            )
    with np.errstate(divide="ignore"):
        logp += np.log(weights)[None, :]
    mx = np.max(logp, axis=1, keepdims=True)
    lse = mx + np.log(np.sum(np.exp(logp - mx), axis=1, keepdims=True))
    return logp, lse


def _farthest_point_seed(pts, k, rng):
    n = pts.shape[0]
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        centers[j] = pts[int(np.argmax(d2))]
        d2 = np.minimum(d2, np.sum((pts - centers[j]) ** 2, axis=1))
    return centers


def fit_em(
    pts,
    k: int,
    max_iter: int,
    rng: np.random.Generator,
    *,
    tol: float = 1e-8,
    n_restarts: int = 3,
    total_count: float | None = None,
    return_history: bool = False,
):
    """Fit a k-component GMD by EM with farthest-point seeding and restarts.

    Stops when the relative log-likelihood change drops below ``tol`` or
    after ``max_iter`` iterations; the best of ``n_restarts`` seeded runs is
    returned.  The log-likelihood trace of the winning run is available via
    ``return_history``.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    n, d = pts.shape
    if k < 1 or max_iter < 1:
        raise ValueError("need k >= 1 and max_iter >= 1")
    if n < k * (d + 1):
        raise ValueError(f"need at least k*(d+1) = {k * (d + 1)} points, got {n}")

    base_cov = np.cov(pts.T, ddof=0).reshape(d, d) + REG_FLOOR * np.eye(d)
    best = None
    degenerate_seen = False

    for _ in range(n_restarts):
        means0 = _farthest_point_seed(pts, k, rng)
        covs0 = np.tile(base_cov, (k, 1, 1))
        weights0 = np.full(k, 1.0 / k)
        status, n_it, degen, weights, means, covs, history = kernels.em_iterate(
            pts, weights0, means0, covs0, base_cov, max_iter, tol, REG_FLOOR
        )
        degenerate_seen = degenerate_seen or bool(degen)
        if status != 0 or n_it == 0:
            continue
        if best is None or history[-1] > best[0]:
            best = (history[-1], weights, means, covs, list(history))

    if best is None:
        raise FitError(f"EM failed to produce a finite fit for k={k} on {n} points")
    if degenerate_seen:
        warnings.warn(
            "an EM cluster had fewer effective points than dimensions; "
            "covariance regularized",
            DegenerateClusterWarning,
            stacklevel=2,
        )

    _, weights, means, covs, history = best
    out = GMD(
        weights / weights.sum(),
        means,
        covs,
        total_count=float(n if total_count is None else total_count),
    )
    if return_history:
        return out, history
    return out


def kl_from_evals(p_vals: np.ndarray, q_vals: np.ndarray) -> float:
    """Monte Carlo KL from precomputed density values at samples of p."""
    pe = np.maximum(p_vals, DENSITY_FLOOR)
    qe = np.maximum(q_vals, DENSITY_FLOOR)
    if np.all(qe <= DENSITY_FLOOR):
        return math.inf
    return float(np.mean(np.log(pe) - np.log(qe)))


def kl_mc(samples, p: GMD, q: GMD) -> float:
    """Monte Carlo KL(p || q) from samples of p: mean log(p(x)/q(x)).

    Density values are floored at ``DENSITY_FLOOR`` before the logarithm;
    if every sample lands below the floor under ``q`` the divergence is
    reported as ``inf``.
    """
    if p.dim != q.dim:
        raise ValueError("p and q must share the same dimension")
    pts = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return kl_from_evals(eval_points(p, pts), eval_points(q, pts))


def gaussian_kl_closed_form(p: GMD, q: GMD) -> float:
    """Exact KL between two single-component Gaussians (test oracle for kl_mc)."""
    if p.n_components != 1 or q.n_components != 1:
        raise ValueError("closed-form KL requires single-component densities")
    if p.dim != q.dim:
        raise ValueError("p and q must share the same dimension")
    d = p.dim
    mu0, s0 = p.means[0], p.covs[0]
    mu1, s1 = q.means[0], q.covs[0]
    l1 = np.linalg.cholesky(s1)
    sol = np.linalg.solve(s1, s0)
    trace = np.trace(sol)
    diff = mu1 - mu0
    y = np.linalg.solve(l1, diff)
    maha = float(y @ y)
    logdet0 = 2.0 * np.log(np.diag(np.linalg.cholesky(s0))).sum()
    logdet1 = 2.0 * np.log(np.diag(l1)).sum()
    return 0.5 * (trace + maha - d + logdet1 - logdet0)
