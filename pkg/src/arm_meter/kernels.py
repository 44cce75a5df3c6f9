"""Backend selection for the numeric hot loops.

The compiled extension ``arm_meter._kernels`` is used when it was built;
otherwise the numpy implementations in :mod:`arm_meter._purepy` are used.
Set ``ARM_METER_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from arm_meter import _purepy

BACKEND = "python"

if os.environ.get("ARM_METER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from arm_meter import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _purepy
else:
    _impl = _purepy

conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward = _impl.conv3x3_backward
filter_histograms = _impl.filter_histograms
cdf_l1 = _impl.cdf_l1

__all__ = [
    "BACKEND",
    "conv3x3_forward",
    "conv3x3_backward",
    "filter_histograms",
    "cdf_l1",
]
