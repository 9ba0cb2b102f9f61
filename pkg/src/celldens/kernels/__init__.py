"""Hot numeric kernels with backend dispatch (see ``celldens.backend``)."""

from __future__ import annotations

import numpy as np

from .. import backend
from .common import (  # noqa: F401
    MAX_STEPS_EXCEEDED,
    MODEL_GENE_EXPR3D,
    MODEL_GROWTH2D,
    NON_FINITE,
    OK,
    STATUS_LABELS,
    STEP_UNDERFLOW,
)
from .numpy_impl import rhs_batch  # noqa: F401


def _impl():
    if backend.active_backend() == "numba":
        from . import numba_impl

        return numba_impl
    from . import numpy_impl

    return numpy_impl


def integrate_states(model_id, params, y0, t0, t1, rtol, atol, max_step=np.inf):
    """Batch-propagate state rows through the model ODE; (states, status)."""
    return _impl().integrate_states(
        int(model_id),
        np.ascontiguousarray(params, dtype=np.float64),
        np.ascontiguousarray(y0, dtype=np.float64),
        float(t0),
        float(t1),
        float(rtol),
        float(atol),
        float(max_step),
    )


def em_iterate(pts, weights, means, covs, base_cov, max_iter, tol, reg_floor):
    """Run one seeded EM iteration loop (see backend implementations)."""
    return _impl().em_iterate(
        np.ascontiguousarray(pts, dtype=np.float64),
        np.ascontiguousarray(weights, dtype=np.float64),
        np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(covs, dtype=np.float64),
        np.ascontiguousarray(base_cov, dtype=np.float64),
        int(max_iter),
        float(tol),
        float(reg_floor),
    )


def integrate_csr(A, y0, t0, t1, rtol, atol, max_step=np.inf):
    """Propagate ``dy/dt = A y`` for a scipy CSR matrix A; (state, status)."""
    return _impl().integrate_csr(
        A.data,
        A.indices,
        A.indptr,
        np.ascontiguousarray(y0, dtype=np.float64),
        float(t0),
        float(t1),
        float(rtol),
        float(atol),
        float(max_step),
    )
