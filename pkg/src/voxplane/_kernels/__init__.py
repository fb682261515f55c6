"""Kernel backend selection.

The compiled extension (``_core``) is preferred when importable; the
pure-numpy ``_fallback`` is used otherwise, or when the environment
variable ``VOXPLANE_FORCE_PYTHON`` is set to a non-empty value. Both
expose the same three functions with identical semantics.
"""
import os

from . import _fallback

if os.environ.get("VOXPLANE_FORCE_PYTHON"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

accumulate = _impl.accumulate
accumulate_moments = _impl.accumulate_moments
assemble_covariance = _impl.assemble_covariance


def available_backends():
    """Name -> module for every importable backend (for benchmarks/tests)."""
    backends = {"python": _fallback}
    try:
        from . import _core
        backends["compiled"] = _core
    except ImportError:
        pass
    return backends
