"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise, or when
``DIFFCOUNT_PURE_PYTHON`` is set to a non-empty value, the NumPy/SciPy
versions take over. Both expose the same four functions.
"""

import importlib
import os

__all__ = [
    "BACKEND",
    "get_backend",
    "render_points",
    "label_components",
    "rejection_radii",
    "reject_candidates",
]


def get_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "cython":
        return importlib.import_module("diffcount._ckernels")
    if name == "python":
        return importlib.import_module("diffcount._pykernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    if os.environ.get("DIFFCOUNT_PURE_PYTHON"):
        return "python", get_backend("python")
    try:
        return "cython", get_backend("cython")
    except ImportError:
        return "python", get_backend("python")


BACKEND, _impl = _select()
render_points = _impl.render_points
label_components = _impl.label_components
rejection_radii = _impl.rejection_radii
reject_candidates = _impl.reject_candidates
