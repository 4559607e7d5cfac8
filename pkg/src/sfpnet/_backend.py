"""Kernel backend selection.

The compiled ``_core`` extension is used when importable; otherwise the numpy
fallback.  ``SFP_BACKEND=python`` forces the fallback, ``SFP_BACKEND=cython``
makes a missing extension an import error.  ``SFP_THREADS`` caps the worker
threads of the compiled kernels (0 = auto).
"""
import os

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

kernels = _fallback


def available() -> list:
    return ["cython", "python"] if _core is not None else ["python"]


def use_backend(name: str):
    """Switch the active kernel backend; returns the previous backend name."""
    global kernels
    previous = kernels.name
    if name == "auto":
        name = "cython" if _core is not None else "python"
    if name == "cython":
        if _core is None:
            raise ImportError("compiled sfpnet._core extension is not built")
        kernels = _core
    elif name == "python":
        kernels = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def set_num_threads(n: int) -> None:
    if _core is not None:
        _core.set_num_threads(int(n))


use_backend(os.environ.get("SFP_BACKEND", "auto"))
set_num_threads(int(os.environ.get("SFP_THREADS", "0") or 0))
