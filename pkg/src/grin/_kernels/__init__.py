"""Hot numeric kernels: compiled core with a NumPy fallback.

The Cython extension is picked at import time when present; set
``GRIN_NO_NATIVE=1`` to force the NumPy implementations.
"""
import os

from . import _pykernels

if os.environ.get("GRIN_NO_NATIVE"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _native as _impl

        BACKEND = "native"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

warp_bilinear = _impl.warp_bilinear
harris_response = _impl.harris_response
pairwise_sqdist = _impl.pairwise_sqdist
min_cross_dist = _impl.min_cross_dist

__all__ = [
    "BACKEND",
    "warp_bilinear",
    "harris_response",
    "pairwise_sqdist",
    "min_cross_dist",
]
