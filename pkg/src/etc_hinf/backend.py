"""Kernel backend selection.

The fixed-point loops in :mod:`etc_hinf.riccati` run either as numba
``@njit`` kernels or as the pure-numpy twins they were compiled from.
Selection order:

1. ``ETC_HINF_BACKEND=numpy`` (or ``numba``) in the environment,
2. default ``numba`` when importable, else ``numpy``.

``use_backend`` swaps the backend at runtime (used by tests and the
benchmark script).
"""

import os

_VALID = ("numba", "numpy")
_backend = None


def _detect_default():
    env = os.environ.get("ETC_HINF_BACKEND", "").strip().lower()
    if env:
        if env not in _VALID:
            raise ValueError("ETC_HINF_BACKEND must be one of %s, got %r" % (_VALID, env))
        if env == "numba" and not _numba_available():
            raise ImportError("ETC_HINF_BACKEND=numba but numba is not importable")
        return env
    return "numba" if _numba_available() else "numpy"


def _numba_available():
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def current_backend():
    """Name of the active kernel backend ('numba' or 'numpy')."""
    global _backend
    if _backend is None:
        _backend = _detect_default()
    return _backend


def kernels():
    """Module object holding the active kernel implementations."""
    if current_backend() == "numba":
        from . import _kernels_numba
        return _kernels_numba
    from . import _kernels_numpy
    return _kernels_numpy


class use_backend:
    """Context manager forcing a backend, restoring the previous one on exit."""

    def __init__(self, name):
        if name not in _VALID:
            raise ValueError("unknown backend %r" % (name,))
        if name == "numba" and not _numba_available():
            raise ImportError("numba backend requested but numba is not importable")
        self._name = name
        self._saved = None

    def __enter__(self):
        global _backend
        self._saved = current_backend()
        _backend = self._name
        return self

    def __exit__(self, *exc):
        global _backend
        _backend = self._saved
        return False
