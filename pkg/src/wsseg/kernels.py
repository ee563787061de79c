"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy versions
take over. Set ``WSSEG_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

if os.environ.get("WSSEG_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

rle_runs = _impl.rle_runs
rle_fill = _impl.rle_fill
confusion = _impl.confusion
crf_kernel_matrix = _impl.crf_kernel_matrix
crf_message = _impl.crf_message
path_max = _impl.path_max
crf_kernel_grid = _impl.crf_kernel_grid


def backends():
    """Return every importable backend module keyed by name."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
