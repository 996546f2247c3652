"""Backend selection for the elementwise kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``FLDM_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FLDM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

ddim_step = _impl.ddim_step
ddim_invert = _impl.ddim_invert
fuse = _impl.fuse
cfg = _impl.cfg
mean_pairwise_cosine = _impl.mean_pairwise_cosine

__all__ = [
    "BACKEND",
    "cfg",
    "ddim_invert",
    "ddim_step",
    "fuse",
    "mean_pairwise_cosine",
]
