"""Kernel selection: compiled extension if importable, numpy fallback otherwise.

Set ``PDNS_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py as fallback

compiled = None
if not os.environ.get("PDNS_PURE_PYTHON"):
    try:
        from . import _kernels as compiled  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on build
        compiled = None

backend = compiled if compiled is not None else fallback
BACKEND_NAME = "cython" if compiled is not None else "numpy"

mh_sweeps = backend.mh_sweeps
sw_sweeps = backend.sw_sweeps
