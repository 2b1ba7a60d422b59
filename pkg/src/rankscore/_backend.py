"""Select the compiled ADMM kernels when available.

The Cython extension `rankscore._kernels` is optional; if it failed to
build (or RANKSCORE_BACKEND=python is set) we fall back to the numpy
implementation in `rankscore._kernels_py`.  Both expose the same two
functions with identical semantics, so everything above this module is
backend-agnostic.
"""
import os
import warnings

from . import _kernels_py

_choice = os.environ.get("RANKSCORE_BACKEND", "").strip().lower()

if _choice == "python":
    _impl = _kernels_py
elif _choice in ("", "compiled", "cython"):
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _choice:
            warnings.warn("compiled kernels requested via RANKSCORE_BACKEND "
                          "but not importable; using the python backend")
        _impl = _kernels_py
else:
    raise ValueError(f"unknown RANKSCORE_BACKEND={_choice!r}; "
                     "expected 'compiled' or 'python'")

penalized_qr_admm = _impl.penalized_qr_admm
l1_quad_admm = _impl.l1_quad_admm


def backend_name():
    """Name of the active kernel backend ('compiled' or 'python')."""
    return _impl.BACKEND_NAME
