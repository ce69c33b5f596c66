"""Kernel backend selection.

The compiled extension is used when it imports; setting
``SELFTRAIN_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SELFTRAIN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

affine_warp = _impl.affine_warp
im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3


def backends():
    """Return ``{name: module}`` for every backend importable here."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
    except ImportError:
        return found
    found["cython"] = compiled
    return found
