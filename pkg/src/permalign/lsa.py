"""Linear sum assignment with a compiled core and a pure-Python fallback.

The backend is chosen once at import: the Cython extension when it was
built, otherwise ``_lsa_py``. Setting ``PERMALIGN_PURE_PYTHON=1`` forces the
fallback.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import _lsa_py

try:
    if os.environ.get("PERMALIGN_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _lsa_ext
except ImportError:
    _lsa_ext = None

BACKEND = "cython" if _lsa_ext is not None else "python"
_BACKENDS = {"python": _lsa_py.solve_min}
if _lsa_ext is not None:
    _BACKENDS["cython"] = _lsa_ext.solve_min


def available_backends() -> list[str]:
    return list(_BACKENDS)


def _validate(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError(f"assignment matrix must be square, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("assignment matrix has non-finite entries")
    return g


def assignment_objective(g: np.ndarray, perm: np.ndarray) -> float:
    """``sum_i g[i, perm[i]]``, correctly rounded."""
    return math.fsum(g[np.arange(len(perm)), perm].tolist())


def solve_lsa(g, *, backend: str | None = None) -> tuple[np.ndarray, float]:
    """Permutation ``pi`` maximising ``sum_i g[i, pi[i]]``, and that maximum."""
    g = _validate(g)
    if g.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    solver = _BACKENDS[backend or BACKEND]
    perm = solver(-g)
    return perm, assignment_objective(g, perm)
