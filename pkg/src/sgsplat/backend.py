"""Selects compiled extension kernels at import, with a numpy fallback.

Set SGSPLAT_FORCE_PYTHON=1 to skip the extensions (used by the backend
equivalence tests and as an escape hatch on unsupported platforms).
"""

import os
import warnings

FORCE_PYTHON = os.environ.get("SGSPLAT_FORCE_PYTHON", "") not in ("", "0")

_raster_cpu = None
_fusedmlp = None

if not FORCE_PYTHON:
    try:
        from .raster import _cpu as _raster_cpu  # noqa: F401
    except ImportError as exc:
        warnings.warn(f"compiled rasterizer unavailable ({exc}); using numpy fallback")
    try:
        from . import _fusedmlp  # noqa: F401
    except ImportError as exc:
        warnings.warn(f"compiled MLP unavailable ({exc}); using numpy fallback")


def raster_kernels():
    if _raster_cpu is not None:
        return _raster_cpu
    from .raster import kernels_py
    return kernels_py


def have_compiled_raster():
    return _raster_cpu is not None


def fused_mlp():
    return _fusedmlp


def have_fused_mlp():
    return _fusedmlp is not None
