"""Backend selection for the numeric kernels.

The compiled extensions are used when they were built; set
``GRIDNP_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os
from types import SimpleNamespace

from . import _pfkernels_py


def _load_compiled():
    if os.environ.get("GRIDNP_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from ._ext import pfkernels
    except ImportError:  # extensions not built
        return None
    return SimpleNamespace(
        injections=pfkernels.injections,
        jacobian_entries=pfkernels.jacobian_entries,
        jacobian_data=pfkernels.jacobian_data,
    )


_python = SimpleNamespace(
    injections=_pfkernels_py.injections,
    jacobian_entries=_pfkernels_py.jacobian_entries,
    jacobian_data=_pfkernels_py.jacobian_data,
)
_compiled = _load_compiled()

BACKENDS = {"python": _python}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled
BACKEND = "compiled" if _compiled is not None else "python"
_active = BACKENDS[BACKEND]


def get_backend(name=None):
    return _active if name is None else BACKENDS[name]


def injections(indptr, indices, g, b, vm, va):
    return _active.injections(indptr, indices, g, b, vm, va)


def jacobian_entries(indptr, indices, g, b, vm, va, p, q):
    return _active.jacobian_entries(indptr, indices, g, b, vm, va, p, q)


def jacobian_data(indptr, indices, g, b, vm, va, p, q, dest, size):
    return _active.jacobian_data(indptr, indices, g, b, vm, va, p, q, dest, size)


