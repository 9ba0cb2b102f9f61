"""Numba-accelerated kernels: per-trajectory scalar loops, ``@njit(cache=True)``.

Mirrors ``numpy_impl`` step for step; the two backends must stay
interchangeable (see tests/test_kernels.py).
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .common import (
    MAX_FACTOR,
    MAX_STEPS,
    MAX_STEPS_EXCEEDED,
    MIN_FACTOR,
    MODEL_GROWTH2D,
    NON_FINITE,
    OK,
    SAFETY,
    STEP_UNDERFLOW,
    UNDERFLOW_FACTOR,
)
from .tableau import (
    A21,
    A31,
    A32,
    A41,
    A42,
    A43,
    A51,
    A52,
    A53,
    A54,
    A61,
    A62,
    A63,
    A64,
    A65,
    B1,
    B3,
    B4,
    B5,
    B6,
    E1,
    E3,
    E4,
    E5,
    E6,
    E7,
)


@njit(cache=True)
def _rhs(model_id, params, y, out):
    if model_id == MODEL_GROWTH2D:
        z = y[0]
        g = y[1]
        if z < params[0]:
            out[0] = g
        else:
            out[0] = g / 3.5 * (params[1] - z)
        out[1] = 0.0
    else:
        z1 = y[0]
        z2 = y[1]
        k1 = y[2]
        out[0] = k1 - z1
        out[1] = params[0] * z1 - z2
        out[2] = 0.0


@njit(cache=True)
def _integrate_one(model_id, params, y, t0, t1, rtol, atol, max_step):
    d = y.shape[0]
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    k5 = np.empty(d)
    k6 = np.empty(d)
    k7 = np.empty(d)
    ytmp = np.empty(d)
    ynew = np.empty(d)

    t = t0
    h = min(max_step, t1 - t0)
    steps = 0
    nonfin_last = False
    while True:
        rem = t1 - t
        last = h >= rem
        ha = rem if last else h
        if ha < UNDERFLOW_FACTOR * max(1.0, abs(t)):
            return NON_FINITE if nonfin_last else STEP_UNDERFLOW
        steps += 1
        if steps > MAX_STEPS:
            return MAX_STEPS_EXCEEDED

        _rhs(model_id, params, y, k1)
        for i in range(d):
            ytmp[i] = y[i] + ha * (A21 * k1[i])
        _rhs(model_id, params, ytmp, k2)
        for i in range(d):
            ytmp[i] = y[i] + ha * (A31 * k1[i] + A32 * k2[i])
        _rhs(model_id, params, ytmp, k3)
        for i in range(d):
            ytmp[i] = y[i] + ha * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
        _rhs(model_id, params, ytmp, k4)
        for i in range(d):
            ytmp[i] = y[i] + ha * (
                A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]
            )
        _rhs(model_id, params, ytmp, k5)
        for i in range(d):
            ytmp[i] = y[i] + ha * (
                A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]
            )
        _rhs(model_id, params, ytmp, k6)
        for i in range(d):
            ynew[i] = y[i] + ha * (
                B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]
            )
        _rhs(model_id, params, ynew, k7)

        acc = 0.0
        finite = True
        for i in range(d):
            if not np.isfinite(ynew[i]):
                finite = False
            e = ha * (
                E1 * k1[i]
                + E3 * k3[i]
                + E4 * k4[i]
                + E5 * k5[i]
                + E6 * k6[i]
                + E7 * k7[i]
            )
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            r = e / sc
            acc += r * r
        enorm = np.sqrt(acc / d)
        if not np.isfinite(enorm):
            finite = False

        if finite:
            nonfin_last = False
            if enorm <= 1.0:
                for i in range(d):
                    y[i] = ynew[i]
                if last:
                    return OK
                t += ha
            if enorm == 0.0:
                fac = MAX_FACTOR
            else:
                fac = min(max(SAFETY * enorm**-0.2, MIN_FACTOR), MAX_FACTOR)
            h = min(ha * fac, max_step)
        else:
            nonfin_last = True
            h = ha * 0.1


@njit(cache=True)
def integrate_states(model_id, params, y0, t0, t1, rtol, atol, max_step):
    n = y0.shape[0]
    out = y0.copy()
    status = np.zeros(n, dtype=np.int64)
    if t1 == t0:
        return out, status
    for j in range(n):
        status[j] = _integrate_one(
            model_id, params, out[j], t0, t1, rtol, atol, max_step
        )
    return out, status


_LOG2E = 1.4426950408889634074
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
# reciprocal factorials for the exp(r) Taylor polynomial, |r| <= ln(2)/2
_EXP_C = (
    1.0 / 2,
    1.0 / 6,
    1.0 / 24,
    1.0 / 120,
    1.0 / 720,
    1.0 / 5040,
    1.0 / 40320,
    1.0 / 362880,
    1.0 / 3628800,
    1.0 / 39916800,
    1.0 / 479001600,
    1.0 / 6227020800,
)


@njit(cache=True)
def _vec_exp_nonpos(a, scale_bits):
    """In-place exp for nonpositive args; branch-free so LLVM can vectorize.

    Elements are clamped at -700 (results below ~1e-304 flush toward 0),
    which is ample for responsibility weights.  ``scale_bits`` is an int64
    scratch buffer of the same length.
    """
    n = a.shape[0]
    c0, c1, c2, c3, c4, c5, c6, c7, c8, c9, c10, c11 = _EXP_C
    for i in range(n):
        x = a[i]
        if x < -700.0:
            x = -700.0
        kd = np.rint(x * _LOG2E)
        r = (x - kd * _LN2_HI) - kd * _LN2_LO
        p = c11
        p = p * r + c10
        p = p * r + c9
        p = p * r + c8
        p = p * r + c7
        p = p * r + c6
        p = p * r + c5
        p = p * r + c4
        p = p * r + c3
        p = p * r + c2
        p = p * r + c1
        p = p * r + c0
        p = (p * r + 1.0) * r + 1.0
        scale_bits[i] = (np.int64(kd) + 1023) << 52
        a[i] = p
    s = scale_bits.view(np.float64)
    for i in range(n):
        a[i] = a[i] * s[i]


@njit(cache=True)
def _chol_lower(a, L):
    """In-place lower Cholesky; returns False when not positive definite."""
    d = a.shape[0]
    for i in range(d):
        for j in range(i + 1):
            s = a[i, j]
            for t in range(j):
                s -= L[i, t] * L[j, t]
            if i == j:
                if s <= 0.0 or not np.isfinite(s):
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
        for j in range(i + 1, d):
            L[i, j] = 0.0
    return True


@njit(cache=True)
def _em_mstep(pts, resp, weights, means, covs, base_cov, reg_floor):
    """Shared M step; returns 1 when a degenerate cluster was seen."""
    n, d = pts.shape
    k = weights.shape[0]
    degenerate = 0
    any_empty = False
    for l in range(k):
        nk = 0.0
        for p in range(n):
            nk += resp[p, l]
        if nk < d + 1:
            degenerate = 1
        if nk < 1e-12:
            any_empty = True
            weights[l] = 0.0
            for i in range(d):
                for j in range(d):
                    covs[l, i, j] = base_cov[i, j]
        else:
            weights[l] = nk / n
            for i in range(d):
                m = 0.0
                for p in range(n):
                    m += resp[p, l] * pts[p, i]
                means[l, i] = m / nk
            for i in range(d):
                for j in range(i, d):
                    c = 0.0
                    for p in range(n):
                        c += (
                            resp[p, l]
                            * (pts[p, i] - means[l, i])
                            * (pts[p, j] - means[l, j])
                        )
                    c /= nk
                    covs[l, i, j] = c
                    covs[l, j, i] = c
            for i in range(d):
                covs[l, i, i] += reg_floor
    if any_empty:
        wsum = 0.0
        for l in range(k):
            if weights[l] < 1e-12:
                weights[l] = 1e-12
            wsum += weights[l]
        for l in range(k):
            weights[l] /= wsum
    return degenerate


@njit(cache=True)
def _blocked_log_sum(s):
    """sum(log(s_i)) for s_i in [1, k]: log of 8-element products, vectorizable."""
    n = s.shape[0]
    total = 0.0
    p = 0
    while p + 8 <= n:
        prod = (
            s[p]
            * s[p + 1]
            * s[p + 2]
            * s[p + 3]
            * s[p + 4]
            * s[p + 5]
            * s[p + 6]
            * s[p + 7]
        )
        total += np.log(prod)
        p += 8
    while p < n:
        total += np.log(s[p])
        p += 1
    return total


@njit(cache=True)
def em_iterate(pts, weights, means, covs, base_cov, max_iter, tol, reg_floor):
    """Seeded EM run mirroring numpy_impl.em_iterate step for step.

    The one-dimensional case (the hot path: output-density refits run every
    prediction step) uses flat buffers and the vectorizable exponential.
    """
    n, d = pts.shape
    k = weights.shape[0]
    weights = weights.copy()
    means = means.copy()
    covs = covs.copy()
    log2pi = np.log(2.0 * np.pi)
    hist = np.empty(max_iter)
    resp = np.empty((n, k))
    logdet = np.empty(k)
    logw = np.empty(k)
    ll_prev = -np.inf
    degenerate = 0
    it = 0

    if d == 1:
        # component-major layout: every loop below is a contiguous stream
        x = pts[:, 0].copy()
        amat = np.empty(k * n)
        bits = np.empty(k * n, dtype=np.int64)
        mx = np.empty(n)
        srow = np.empty(n)
        inv = np.empty(n)
        while it < max_iter:
            ok = True
            for l in range(k):
                v = covs[l, 0, 0]
                if not (v > 0.0 and np.isfinite(v)):
                    ok = False
                    break
                lw = np.log(weights[l]) if weights[l] > 0.0 else -np.inf
                head = lw - 0.5 * np.log(v) - 0.5 * log2pi
                half_inv_var = 0.5 / v
                m = means[l, 0]
                base = l * n
                for p in range(n):
                    dx = x[p] - m
                    amat[base + p] = head - dx * dx * half_inv_var
            if not ok:
                return 1, it, degenerate, weights, means, covs, hist[:it]

            for p in range(n):
                mx[p] = amat[p]
            for l in range(1, k):
                base = l * n
                for p in range(n):
                    v = amat[base + p]
                    if v > mx[p]:
                        mx[p] = v
            for l in range(k):
                base = l * n
                for p in range(n):
                    amat[base + p] -= mx[p]
            _vec_exp_nonpos(amat, bits)
            for p in range(n):
                srow[p] = amat[p]
            for l in range(1, k):
                base = l * n
                for p in range(n):
                    srow[p] += amat[base + p]
            ll = _blocked_log_sum(srow)
            for p in range(n):
                ll += mx[p]
            if not np.isfinite(ll):
                return 1, it, degenerate, weights, means, covs, hist[:it]
            hist[it] = ll
            it += 1
            if np.isfinite(ll_prev) and abs(ll - ll_prev) < tol * max(
                1.0, abs(ll_prev)
            ):
                break
            ll_prev = ll

            # responsibilities (still in amat) and the d = 1 M step
            for p in range(n):
                inv[p] = 1.0 / srow[p]
            any_empty = False
            for l in range(k):
                base = l * n
                nk = 0.0
                s1 = 0.0
                for p in range(n):
                    r = amat[base + p] * inv[p]
                    amat[base + p] = r
                    nk += r
                    s1 += r * x[p]
                if nk < 2.0:
                    degenerate = 1
                if nk < 1e-12:
                    any_empty = True
                    weights[l] = 0.0
                    covs[l, 0, 0] = base_cov[0, 0]
                else:
                    weights[l] = nk / n
                    m = s1 / nk
                    means[l, 0] = m
                    s2 = 0.0
                    for p in range(n):
                        dxp = x[p] - m
                        s2 += amat[base + p] * dxp * dxp
                    covs[l, 0, 0] = s2 / nk + reg_floor
            if any_empty:
                wsum = 0.0
                for l in range(k):
                    if weights[l] < 1e-12:
                        weights[l] = 1e-12
                    wsum += weights[l]
                for l in range(k):
                    weights[l] /= wsum
        return 0, it, degenerate, weights, means, covs, hist[:it]

    chol = np.empty((k, d, d))
    tmp = np.empty(k)
    y = np.empty(d)
    while it < max_iter:
        ok = True
        for l in range(k):
            if not _chol_lower(covs[l], chol[l]):
                ok = False
                break
            s = 0.0
            for i in range(d):
                s += np.log(chol[l, i, i])
            logdet[l] = s
            logw[l] = np.log(weights[l]) if weights[l] > 0.0 else -np.inf
        if not ok:
            return 1, it, degenerate, weights, means, covs, hist[:it]

        ll = 0.0
        for p in range(n):
            mx = -np.inf
            for l in range(k):
                q = 0.0
                for i in range(d):
                    acc = pts[p, i] - means[l, i]
                    for t in range(i):
                        acc -= chol[l, i, t] * y[t]
                    y[i] = acc / chol[l, i, i]
                    q += y[i] * y[i]
                v = logw[l] - logdet[l] - 0.5 * (q + d * log2pi)
                tmp[l] = v
                if v > mx:
                    mx = v
            s = 0.0
            for l in range(k):
                e = np.exp(tmp[l] - mx)
                tmp[l] = e
                s += e
            ll += mx + np.log(s)
            for l in range(k):
                resp[p, l] = tmp[l] / s
        if not np.isfinite(ll):
            return 1, it, degenerate, weights, means, covs, hist[:it]
        hist[it] = ll
        it += 1
        if np.isfinite(ll_prev) and abs(ll - ll_prev) < tol * max(1.0, abs(ll_prev)):
            break
        ll_prev = ll
        if _em_mstep(pts, resp, weights, means, covs, base_cov, reg_floor):
            degenerate = 1

    return 0, it, degenerate, weights, means, covs, hist[:it]


@njit(cache=True)
def _csr_matvec(data, indices, indptr, x, out):
    m = x.shape[0]
    for i in range(m):
        s = 0.0
        for jj in range(indptr[i], indptr[i + 1]):
            s += data[jj] * x[indices[jj]]
        out[i] = s


@njit(cache=True)
def integrate_csr(data, indices, indptr, y0, t0, t1, rtol, atol, max_step):
    y = y0.copy()
    m = y.shape[0]
    if t1 == t0:
        return y, OK
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    k5 = np.empty(m)
    k6 = np.empty(m)
    k7 = np.empty(m)
    ytmp = np.empty(m)
    ynew = np.empty(m)

    t = t0
    h = min(max_step, t1 - t0)
    steps = 0
    nonfin_last = False
    while True:
        rem = t1 - t
        last = h >= rem
        ha = rem if last else h
        if ha < UNDERFLOW_FACTOR * max(1.0, abs(t)):
            return y, (NON_FINITE if nonfin_last else STEP_UNDERFLOW)
        steps += 1
        if steps > MAX_STEPS:
            return y, MAX_STEPS_EXCEEDED

        _csr_matvec(data, indices, indptr, y, k1)
        for i in range(m):
            ytmp[i] = y[i] + ha * (A21 * k1[i])
        _csr_matvec(data, indices, indptr, ytmp, k2)
        for i in range(m):
            ytmp[i] = y[i] + ha * (A31 * k1[i] + A32 * k2[i])
        _csr_matvec(data, indices, indptr, ytmp, k3)
        for i in range(m):
            ytmp[i] = y[i] + ha * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
        _csr_matvec(data, indices, indptr, ytmp, k4)
        for i in range(m):
            ytmp[i] = y[i] + ha * (
                A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]
            )
        _csr_matvec(data, indices, indptr, ytmp, k5)
        for i in range(m):
            ytmp[i] = y[i] + ha * (
                A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]
            )
        _csr_matvec(data, indices, indptr, ytmp, k6)
        for i in range(m):
            ynew[i] = y[i] + ha * (
                B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]
            )
        _csr_matvec(data, indices, indptr, ynew, k7)

        acc = 0.0
        finite = True
        for i in range(m):
            if not np.isfinite(ynew[i]):
                finite = False
            e = ha * (
                E1 * k1[i]
                + E3 * k3[i]
                + E4 * k4[i]
                + E5 * k5[i]
                + E6 * k6[i]
                + E7 * k7[i]
            )
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            r = e / sc
            acc += r * r
        enorm = np.sqrt(acc / m)
        if not np.isfinite(enorm):
            finite = False

        if finite:
            nonfin_last = False
            if enorm <= 1.0:
                for i in range(m):
                    y[i] = ynew[i]
                if last:
                    return y, OK
                t += ha
            if enorm == 0.0:
                fac = MAX_FACTOR
            else:
                fac = min(max(SAFETY * enorm**-0.2, MIN_FACTOR), MAX_FACTOR)
            h = min(ha * fac, max_step)
        else:
            nonfin_last = True
            h = ha * 0.1
