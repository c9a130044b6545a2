"""Backend selection for the hot voxel-fitting kernel.

The compiled extension is used when it was built; otherwise the numpy
fallback. Setting ``T1Q_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py

if os.environ.get("T1Q_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
fit_batch = _compiled.fit_batch if _compiled is not None else _kernels_py.fit_batch


def available_backends():
    backends = {"python": _kernels_py.fit_batch}
    if _compiled is not None:
        backends["compiled"] = _compiled.fit_batch
    return backends
