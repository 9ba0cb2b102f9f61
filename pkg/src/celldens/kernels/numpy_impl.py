"""Pure-numpy kernels.

``integrate_states`` advances a batch of independent trajectories with
per-trajectory adaptive steps (vectorized over the batch, so each trajectory
sees exactly the step sequence the scalar numba loop would produce).
``integrate_csr`` advances one large linear system ``dy/dt = A y`` with A in
CSR form.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import common as cm
from . import tableau as tb


def rhs_batch(model_id: int, params: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vector field of the selected single-cell model, row-wise over ``y``."""
    if model_id == cm.MODEL_GROWTH2D:
        z_star, z_max = params[0], params[1]
        z, g = y[:, 0], y[:, 1]
        dz = np.where(z < z_star, g, g / 3.5 * (z_max - z))
        return np.stack((dz, np.zeros_like(dz)), axis=1)
    if model_id == cm.MODEL_GENE_EXPR3D:
        k2 = params[0]
        z1, z2, k1 = y[:, 0], y[:, 1], y[:, 2]
        return np.stack((k1 - z1, k2 * z1 - z2, np.zeros_like(k1)), axis=1)
    raise ValueError(f"unknown model id {model_id}")


def integrate_states(model_id, params, y0, t0, t1, rtol, atol, max_step):
    """Integrate each row of ``y0`` from t0 to t1; returns (states, status)."""
    y = np.array(y0, dtype=np.float64, copy=True)
    n, _ = y.shape
    status = np.zeros(n, dtype=np.int64)
    if t1 == t0 or n == 0:
        return y, status

    t = np.full(n, float(t0))
    h = np.full(n, min(max_step, t1 - t0))
    steps = np.zeros(n, dtype=np.int64)
    nonfin_last = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)

    def f(states):
        return rhs_batch(model_id, params, states)

    while alive.any():
        idx = np.flatnonzero(alive)
        ya, ta = y[idx], t[idx]
        rem = t1 - ta
        last = h[idx] >= rem
        ha = np.where(last, rem, h[idx])

        tiny = cm.UNDERFLOW_FACTOR * np.maximum(1.0, np.abs(ta))
        dead = ha < tiny
        if dead.any():
            rows = idx[dead]
            status[rows] = np.where(
                nonfin_last[rows], cm.NON_FINITE, cm.STEP_UNDERFLOW
            )
            alive[rows] = False
            if dead.all():
                continue
            keep = ~dead
            idx, ya, ha, last = idx[keep], ya[keep], ha[keep], last[keep]

        steps[idx] += 1
        over = steps[idx] > cm.MAX_STEPS
        if over.any():
            rows = idx[over]
            status[rows] = cm.MAX_STEPS_EXCEEDED
            alive[rows] = False
            if over.all():
                continue
            keep = ~over
            idx, ya, ha, last = idx[keep], ya[keep], ha[keep], last[keep]

        hb = ha[:, None]
        with np.errstate(all="ignore"):
            k1 = f(ya)
            k2 = f(ya + hb * (tb.A21 * k1))
            k3 = f(ya + hb * (tb.A31 * k1 + tb.A32 * k2))
            k4 = f(ya + hb * (tb.A41 * k1 + tb.A42 * k2 + tb.A43 * k3))
            k5 = f(ya + hb * (tb.A51 * k1 + tb.A52 * k2 + tb.A53 * k3 + tb.A54 * k4))
            k6 = f(
                ya
                + hb
                * (tb.A61 * k1 + tb.A62 * k2 + tb.A63 * k3 + tb.A64 * k4 + tb.A65 * k5)
            )
            ynew = ya + hb * (
                tb.B1 * k1 + tb.B3 * k3 + tb.B4 * k4 + tb.B5 * k5 + tb.B6 * k6
            )
            k7 = f(ynew)
            err = hb * (
                tb.E1 * k1
                + tb.E3 * k3
                + tb.E4 * k4
                + tb.E5 * k5
                + tb.E6 * k6
                + tb.E7 * k7
            )
            sc = atol + rtol * np.maximum(np.abs(ya), np.abs(ynew))
            enorm = np.sqrt(np.mean((err / sc) ** 2, axis=1))

        finite = np.isfinite(enorm) & np.all(np.isfinite(ynew), axis=1)
        accept = finite & (enorm <= 1.0)
        done = accept & last

        y[idx[accept]] = ynew[accept]
        stepped = accept & ~last
        t[idx[stepped]] += ha[stepped]
        t[idx[done]] = t1
        alive[idx[done]] = False

        with np.errstate(all="ignore"):
            fac = cm.SAFETY * enorm**-0.2
        fac = np.where(
            enorm == 0.0, cm.MAX_FACTOR, np.clip(fac, cm.MIN_FACTOR, cm.MAX_FACTOR)
        )
        hnew = np.where(finite, ha * fac, ha * 0.1)
        h[idx] = np.minimum(hnew, max_step)
        nonfin_last[idx] = ~finite

    return y, status


def em_iterate(pts, weights, means, covs, base_cov, max_iter, tol, reg_floor):
    """One seeded EM run (E/M loop only; seeding and restarts live upstream).

    Returns (status, n_iters, degenerate_flag, weights, means, covs, ll_history)
    with status 0 on success and 1 when a covariance factorization or the
    log-likelihood went bad.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n, d = pts.shape
    k = weights.shape[0]
    weights = weights.copy()
    means = means.copy()
    covs = covs.copy()
    eye = np.eye(d)
    log2pi = np.log(2.0 * np.pi)
    hist = np.empty(max_iter)
    ll_prev = -np.inf
    degenerate = 0
    it = 0

    while it < max_iter:
        logp = np.empty((n, k))
        try:
            for l in range(k):
                L = np.linalg.cholesky(covs[l])
                y = np.linalg.solve(L, (pts - means[l]).T)
                logp[:, l] = (
                    -0.5 * np.sum(y**2, axis=0)
                    - np.log(np.diag(L)).sum()
                    - 0.5 * d * log2pi
                )
        except np.linalg.LinAlgError:
            return 1, it, degenerate, weights, means, covs, hist[:it]
        with np.errstate(divide="ignore"):
            logp += np.log(weights)[None, :]
        mx = np.max(logp, axis=1, keepdims=True)
        lse = mx + np.log(np.sum(np.exp(logp - mx), axis=1, keepdims=True))
        ll = float(lse.sum())
        if not np.isfinite(ll):
            return 1, it, degenerate, weights, means, covs, hist[:it]
        hist[it] = ll
        it += 1
        if np.isfinite(ll_prev) and abs(ll - ll_prev) < tol * max(1.0, abs(ll_prev)):
            break
        ll_prev = ll

        resp = np.exp(logp - lse)
        nk = resp.sum(axis=0)
        if np.any(nk < d + 1):
            degenerate = 1
        empty = nk < 1e-12
        nk_safe = np.where(empty, 1.0, nk)
        weights = nk / n
        if np.any(empty):
            weights = np.maximum(weights, 1e-12)
            weights /= weights.sum()
        new_means = (resp.T @ pts) / nk_safe[:, None]
        means = np.where(empty[:, None], means, new_means)
        for l in range(k):
            if empty[l]:
                covs[l] = base_cov
                continue
            diff = pts - means[l]
            covs[l] = ((resp[:, l][:, None] * diff).T @ diff) / nk[l]
            covs[l] += reg_floor * eye

    return 0, it, degenerate, weights, means, covs, hist[:it]


def integrate_csr(data, indices, indptr, y0, t0, t1, rtol, atol, max_step):
    """Integrate ``dy/dt = A y`` (A in CSR form) from t0 to t1."""
    y = np.array(y0, dtype=np.float64, copy=True)
    m = y.shape[0]
    if t1 == t0:
        return y, cm.OK
    A = sp.csr_matrix((data, indices, indptr), shape=(m, m))

    t = float(t0)
    h = min(max_step, t1 - t0)
    steps = 0
    nonfin_last = False
    while True:
        rem = t1 - t
        last = h >= rem
        ha = rem if last else h
        if ha < cm.UNDERFLOW_FACTOR * max(1.0, abs(t)):
            return y, (cm.NON_FINITE if nonfin_last else cm.STEP_UNDERFLOW)
        steps += 1
        if steps > cm.MAX_STEPS:
            return y, cm.MAX_STEPS_EXCEEDED

        with np.errstate(all="ignore"):
            k1 = A @ y
            k2 = A @ (y + ha * (tb.A21 * k1))
            k3 = A @ (y + ha * (tb.A31 * k1 + tb.A32 * k2))
            k4 = A @ (y + ha * (tb.A41 * k1 + tb.A42 * k2 + tb.A43 * k3))
            k5 = A @ (y + ha * (tb.A51 * k1 + tb.A52 * k2 + tb.A53 * k3 + tb.A54 * k4))
            k6 = A @ (
                y
                + ha
                * (tb.A61 * k1 + tb.A62 * k2 + tb.A63 * k3 + tb.A64 * k4 + tb.A65 * k5)
            )
            ynew = y + ha * (
                tb.B1 * k1 + tb.B3 * k3 + tb.B4 * k4 + tb.B5 * k5 + tb.B6 * k6
            )
            k7 = A @ ynew
            err = ha * (
                tb.E1 * k1
                + tb.E3 * k3
                + tb.E4 * k4
                + tb.E5 * k5
                + tb.E6 * k6
                + tb.E7 * k7
            )
            sc = atol + rtol * np.maximum(np.abs(y), np.abs(ynew))
            enorm = float(np.sqrt(np.mean((err / sc) ** 2)))

        finite = np.isfinite(enorm) and bool(np.all(np.isfinite(ynew)))
        if finite:
            nonfin_last = False
            if enorm <= 1.0:
                y = ynew
                if last:
                    return y, cm.OK
                t += ha
            if enorm == 0.0:
                fac = cm.MAX_FACTOR
            else:
                fac = min(max(cm.SAFETY * enorm**-0.2, cm.MIN_FACTOR), cm.MAX_FACTOR)
            h = min(ha * fac, max_step)
        else:
            nonfin_last = True
            h = ha * 0.1
