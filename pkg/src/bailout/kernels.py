"""Backend selection for the feature kernels.

The compiled extension is used when it imports; set ``BAILOUT_PURE_PYTHON=1``
to force the numpy reference implementation.
"""

import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("BAILOUT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

greedy_zbar_batch = _impl.greedy_zbar_batch
z_path = _impl.z_path

__all__ = ["BACKEND", "greedy_zbar_batch", "z_path"]
