"""Numerical backend selection for the hot kernels.

The trajectory and sparse-operator integrators come in two flavours: a
numba ``@njit`` implementation and a pure-numpy fallback.  The environment
variable ``CELLDENS_BACKEND`` picks one (``numba``, ``numpy`` or ``auto``;
``auto`` prefers numba when it imports cleanly).  ``benchmarks/`` contains a
script comparing the two.
"""

from __future__ import annotations

import os

ENV_VAR = "CELLDENS_BACKEND"

_VALID = ("auto", "numba", "numpy")
_active: str | None = None


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except Exception:
        return False
    return True


def active_backend() -> str:
    """Resolve the backend name, reading the environment on first use."""
    global _active
    if _active is None:
        raw = os.environ.get(ENV_VAR, "auto").strip().lower() or "auto"
        if raw not in _VALID:
            raise ValueError(f"{ENV_VAR} must be one of {_VALID}, got {raw!r}")
        if raw == "auto":
            raw = "numba" if numba_available() else "numpy"
        _active = raw
    return _active


def set_backend(name: str | None) -> None:
    """Force a backend; ``None`` re-reads the environment on next use."""
    global _active
    if name is not None and name not in ("numba", "numpy"):
        raise ValueError(f"backend must be 'numba' or 'numpy', got {name!r}")
    _active = name
