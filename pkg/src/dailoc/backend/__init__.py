"""Kernel backend selection.

Imports the compiled Cython core when it is available, otherwise the numpy
fallback. `DAILOC_BACKEND=python` or `DAILOC_BACKEND=c` forces the choice
(forcing `c` raises if the extension was not built). Everything downstream
imports the kernels from here.
"""

from __future__ import annotations

import os

from . import kernels_py

_requested = os.environ.get("DAILOC_BACKEND", "").strip().lower()

if _requested in ("", "c", "auto"):
    try:
        from . import _kernels_c as _impl
    except ImportError:
        if _requested == "c":
            raise ImportError(
                "DAILOC_BACKEND=c requested but the compiled kernel core is not "
                "built; install with a C compiler or unset DAILOC_BACKEND"
            )
        _impl = kernels_py
elif _requested in ("python", "py", "numpy"):
    _impl = kernels_py
else:
    raise ValueError(f"unknown DAILOC_BACKEND value {_requested!r}")

BACKEND_NAME: str = _impl.NAME

IDENTITY: int = _impl.IDENTITY
RELU: int = _impl.RELU
SIGMOID: int = _impl.SIGMOID
SOFTPLUS: int = _impl.SOFTPLUS

dense_forward = _impl.dense_forward
dense_backward = _impl.dense_backward
adam_step_inplace = _impl.adam_step_inplace
pairwise_sq_dists = _impl.pairwise_sq_dists


def available_backends() -> list[str]:
    """Names of the kernel implementations importable in this environment."""
    names = ["python"]
    try:
        from . import _kernels_c  # noqa: F401
        names.append("c")
    except ImportError:
        pass
    return names
