"""Backend selection for the geometry kernels.

The compiled extension is used when it imports; setting
``RSVLTS_PURE_PYTHON=1`` forces the pure-Python twin.
"""

import os

from rsvlts import _kernels_py

if os.environ.get("RSVLTS_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from rsvlts import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

signed_area = _impl.signed_area
clip_convex = _impl.clip_convex
intersection_area = _impl.intersection_area
rasterize = _impl.rasterize


def available_backends():
    """Map backend name to kernel module for every importable backend."""
    found = {"python": _kernels_py}
    try:
        from rsvlts import _kernels
    except ImportError:
        pass
    else:
        found["cython"] = _kernels
    return found
