"""Hot-loop kernels, compiled when available.

The compiled extension is used unless it failed to build or
``ADVBENCH_PURE_PYTHON=1`` is set, in which case the numpy versions are used.
``BACKEND`` names the active implementation.
"""

import os

from advbench import _kernels_py

if os.environ.get("ADVBENCH_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from advbench import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
]
