"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``KBMPC_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

if os.environ.get("KBMPC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

plant_rhs_batch = _impl.plant_rhs_batch
rk4_batch = _impl.rk4_batch
admm_iterate = _impl.admm_iterate

CONVERGED = _pykernels.CONVERGED
CHUNK_DONE = _pykernels.CHUNK_DONE
PRIMAL_INFEASIBLE = _pykernels.PRIMAL_INFEASIBLE


def get_backend(name: str):
    """Return the kernel module for `name` ('python' or 'cython')."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
