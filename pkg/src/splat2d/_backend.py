"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the NumPy fallback.
``SPLAT2D_BACKEND=python`` forces the fallback, ``SPLAT2D_BACKEND=cython``
makes a missing extension an import error instead of a silent fallback.
"""

import contextlib
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_KERNELS = {"python": _pykernels}
if _ckernels is not None:
    _KERNELS["cython"] = _ckernels

_requested = os.environ.get("SPLAT2D_BACKEND", "").strip().lower()
if _requested == "cython" and _ckernels is None:
    raise ImportError("SPLAT2D_BACKEND=cython but splat2d._ckernels is not built")
if _requested and _requested not in ("python", "cython"):
    raise ImportError(f"unknown SPLAT2D_BACKEND {_requested!r}")

_active = _requested or ("cython" if _ckernels is not None else "python")


def available() -> list[str]:
    return sorted(_KERNELS)


def name() -> str:
    return _active


def kernels():
    return _KERNELS[_active]


def set_backend(backend: str) -> None:
    global _active
    if backend not in _KERNELS:
        raise ValueError(f"backend {backend!r} unavailable; have {available()}")
    _active = backend


@contextlib.contextmanager
def use_backend(backend: str):
    previous = _active
    set_backend(backend)
    try:
        yield
    finally:
        set_backend(previous)
