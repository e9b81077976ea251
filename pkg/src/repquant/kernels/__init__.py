"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``REPQUANT_NUMBA=0`` to force
the numpy path; numba is used by default whenever it can be imported.

Both backends expose the same four functions:

``conv1d_forward(x, w, b)``
    Same-length stride-1 convolution over the time axis of a ``(B, T, C_in)``
    array with ``(C_out, C_in, k)`` weights.
``conv1d_backward(gy, x, w)``
    Returns ``(grad_x, grad_w, grad_b)`` for the forward above.
``nearest(z, e)``
    Index of the closest codebook row for every row of ``z`` and the squared
    distance to it. Ties resolve to the lowest index.
``cluster_stats(z, idx, k)``
    Per-cluster counts and vector sums.

Under the numba backend the convolutions still dispatch to the numpy path:
im2col plus a BLAS matmul beats the compiled loops at every shape measured
(see ``benchmarks/bench_kernels.py``). The compiled versions stay available as
``numba_backend.conv1d_forward`` and ``numba_backend.conv1d_backward``.
"""
import os

from . import _numpy

numpy_backend = _numpy

_flag = os.environ.get("REPQUANT_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "no", "off", "")

try:
    from . import _numba as numba_backend
except ImportError:  # numba not installed
    numba_backend = None

if _want_numba and numba_backend is not None:
    BACKEND = "numba"
    _impl = numba_backend
else:
    BACKEND = "numpy"
    _impl = _numpy

conv1d_forward = _numpy.conv1d_forward
conv1d_backward = _numpy.conv1d_backward
nearest = _impl.nearest
cluster_stats = _impl.cluster_stats

__all__ = [
    "BACKEND",
    "numpy_backend",
    "numba_backend",
    "conv1d_forward",
    "conv1d_backward",
    "nearest",
    "cluster_stats",
]
