"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and imports cleanly;
set ``FACEREG_PURE_PYTHON=1`` to force the numpy implementations.
"""
from __future__ import annotations

import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("FACEREG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # pragma: no cover - depends on build
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKEND = "compiled" if _compiled is not None else "python"

_impl = _compiled if _compiled is not None else _pykernels

scatter_add_rows = _impl.scatter_add_rows
bvh_closest = _impl.bvh_closest
closest_point_triangles = _pykernels.closest_point_triangles


def backends() -> dict:
    """Available kernel modules by name, for benchmarks and cross-checks."""
    out = {"python": _pykernels}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out
