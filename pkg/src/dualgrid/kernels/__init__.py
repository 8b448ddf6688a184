"""Hot numerical kernels with a compiled core and a pure-numpy fallback.

The compiled extension (``dualgrid.kernels._core``, Cython) and the numpy
implementation (``dualgrid.kernels.numpy_backend``) are written operation-for-
operation identical, so results are bit-for-bit the same whichever is active.
Selection happens once at import:

* ``DUALGRID_KERNELS=cy``   require the compiled core (ImportError if missing)
* ``DUALGRID_KERNELS=py``   force the numpy fallback
* unset / ``auto``          compiled core when available, fallback otherwise

``BACKEND`` records which one won.  ``benchmarks/bench_kernels.py`` compares
the two.
"""

import os

from . import numpy_backend as _py

try:
    from . import _core as _cy
except ImportError:
    _cy = None

_choice = os.environ.get("DUALGRID_KERNELS", "auto").lower()
if _choice == "py":
    _impl = _py
elif _choice == "cy":
    if _cy is None:
        raise ImportError(
            "DUALGRID_KERNELS=cy but the compiled extension dualgrid.kernels._core "
            "is not built; install the package (pip install -e . --no-build-isolation)"
        )
    _impl = _cy
elif _choice == "auto":
    _impl = _cy if _cy is not None else _py
else:
    raise ValueError(f"DUALGRID_KERNELS must be auto|cy|py, got {_choice!r}")

BACKEND = "cy" if _impl is _cy else "py"

scatter_add = _impl.scatter_add
stencil7 = _impl.stencil7
upwind_div = _impl.upwind_div
pair_forces = _impl.pair_forces

__all__ = ["BACKEND", "scatter_add", "stencil7", "upwind_div", "pair_forces"]
