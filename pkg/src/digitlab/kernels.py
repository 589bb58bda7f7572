"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy versions
in ``_pykernels`` take over. Set ``DIGITLAB_KERNELS=python`` to force the
fallback (the test suite runs both and compares them).
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DIGITLAB_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward


def available_backends():
    """Map backend name to kernel module for every backend importable here."""
    backends = {"python": _pykernels}
    try:
        from . import _kernels

        backends["cython"] = _kernels
    except ImportError:
        pass
    return backends
