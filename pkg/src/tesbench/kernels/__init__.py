"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the TESBENCH_BACKEND
environment variable:

  auto   (default) use numba when importable, otherwise numpy
  numba  require the numba kernels (ImportError if numba is missing)
  numpy  force the pure-numpy kernels

``benchmarks/bench_kernels.py`` compares the two paths.
"""

import os

from . import numpy_kernels

_requested = os.environ.get("TESBENCH_BACKEND", "auto").lower()

if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(f"TESBENCH_BACKEND must be auto|numba|numpy, got {_requested!r}")

if _requested == "numpy":
    _impl = numpy_kernels
elif _requested == "numba":
    from . import numba_kernels as _impl
else:
    try:
        from . import numba_kernels as _impl
    except ImportError:
        _impl = numpy_kernels

BACKEND = _impl.BACKEND_NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernel = _impl.conv2d_backward_kernel
conv_output_hw = numpy_kernels.conv_output_hw
