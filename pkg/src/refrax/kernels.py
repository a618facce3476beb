"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is used. Setting ``REFRAX_PURE_PYTHON=1`` forces the fallback.
"""

import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

_FORCE_PURE = os.environ.get("REFRAX_PURE_PYTHON", "") not in ("", "0")

if _FORCE_PURE:
    _backend = _fallback
else:
    try:
        from . import _core as _backend
    except ImportError:  # extension not built
        logger.info("refrax._core unavailable, using numpy kernels")
        _backend = _fallback

BACKEND = "compiled" if _backend is not _fallback else "python"

bvh_intersect = _backend.bvh_intersect
trilinear_gather = _backend.trilinear_gather
trilinear_scatter = _backend.trilinear_scatter
adam_step = _backend.adam_step
field_forward = _backend.field_forward
field_backward = _backend.field_backward
path_samples = _backend.path_samples
merge_sorted = _backend.merge_sorted


def get_backend(name):
    """Return the kernel module called ``name`` ('compiled' or 'python')."""
    if name == "python":
        return _fallback
    if name == "compiled":
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")
