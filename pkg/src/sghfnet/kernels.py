"""Backend selection for the convolution hot loops.

The compiled extension ``sghfnet._kernels`` is used when it imports; otherwise
(or when ``SGHFNET_PURE_PYTHON=1``) the numpy fallback is used.  Both backends
produce bitwise identical results.
"""

import os
import warnings

import numpy as np

from . import _kernels_py

_BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _kernels_ext

    _BACKENDS["cython"] = _kernels_ext
    COMPILED_AVAILABLE = True
except ImportError as exc:  # pragma: no cover - depends on build
    COMPILED_AVAILABLE = False
    if not os.environ.get("SGHFNET_PURE_PYTHON"):
        warnings.warn(f"sghfnet: compiled kernels unavailable ({exc}); using numpy fallback")

_active = "python" if os.environ.get("SGHFNET_PURE_PYTHON") or not COMPILED_AVAILABLE else "cython"


def available_backends():
    return sorted(_BACKENDS)


def get_backend():
    return _active


def set_backend(name):
    """Switch the kernel backend for this process; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    prev, _active = _active, name
    return prev


def im2col3d(xp, kd, kh, kw, sd, sh, sw, od, oh, ow):
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    return _BACKENDS[_active].im2col3d(xp, kd, kh, kw, sd, sh, sw, od, oh, ow)


def col2im3d(cols, dp, hp, wp, sd, sh, sw):
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    return _BACKENDS[_active].col2im3d(cols, dp, hp, wp, sd, sh, sw)
