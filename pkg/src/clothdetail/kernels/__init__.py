"""Hot geometry kernels with a compiled core and a numpy fallback.

The compiled extension (`clothdetail.kernels._fast`, built from Cython) is
preferred when present; `CLOTHDETAIL_KERNELS=python|native` forces a
backend. Both expose identical signatures and are cross-checked by the test
suite; see benchmarks/bench_kernels.py for the speed comparison.
"""

from __future__ import annotations

import os

from . import _reference

_requested = os.environ.get("CLOTHDETAIL_KERNELS", "auto").lower()
if _requested not in ("auto", "native", "python"):
    raise ValueError(f"CLOTHDETAIL_KERNELS must be auto|native|python, got {_requested!r}")

_impl = None
if _requested in ("auto", "native"):
    try:
        from . import _fast as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "native":
            raise
        _impl = None

if _impl is None:
    _impl = _reference
    BACKEND = "python"
else:
    BACKEND = "native"

rasterize_attributes = _impl.rasterize_attributes
winding_numbers = _impl.winding_numbers
closest_points = _impl.closest_points
laplacian_energy_grad = _impl.laplacian_energy_grad
deform_energy_grad = _impl.deform_energy_grad

__all__ = [
    "BACKEND",
    "rasterize_attributes",
    "winding_numbers",
    "closest_points",
    "laplacian_energy_grad",
    "deform_energy_grad",
]
