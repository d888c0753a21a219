"""Backend selection for the convolution/pooling kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``PORTIONMTL_PURE_PYTHON=1`` to force the fallback.
"""

import os

from portionmtl import _pykernels

BACKENDS = {"python": _pykernels}
try:
    from portionmtl import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels

if _ckernels is not None and not os.environ.get("PORTIONMTL_PURE_PYTHON"):
    BACKEND = "cython"
else:
    BACKEND = "python"
_impl = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active backend; returns the previous name."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    prev, BACKEND, _impl = BACKEND, name, BACKENDS[name]
    return prev


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    return _impl.col2im(cols, tuple(shape), kh, kw, stride, pad)


def maxpool_forward(x, k):
    return _impl.maxpool_forward(x, k)


def maxpool_backward(gout, idx, shape, k):
    return _impl.maxpool_backward(gout, idx, tuple(shape), k)


conv_output_size = _pykernels.conv_output_size
