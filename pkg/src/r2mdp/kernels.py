"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the pure-Python
reference in ``_fallback`` takes over. Setting ``R2MDP_PURE_PYTHON=1`` forces
the fallback.
"""
from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("R2MDP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback

VANILLA, R2, ROBUST_CLOSED, ROBUST_ITERATIVE = (
    _fallback.VANILLA, _fallback.R2, _fallback.ROBUST_CLOSED, _fallback.ROBUST_ITERATIVE)
P_INF = _fallback.P_INF

simplex_projection = _impl.simplex_projection
pga_l2_argmax = _impl.pga_l2_argmax
ball_min_pgd = _impl.ball_min_pgd
qlearn_block = _impl.qlearn_block


def norm_code(p: float) -> int:
    """Integer norm code used by the kernels (``inf`` maps to 0)."""
    return P_INF if p == float("inf") else int(p)
