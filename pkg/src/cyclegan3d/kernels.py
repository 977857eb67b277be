"""Backend selection for the hot convolution kernels.

The compiled extension is used when it imports; set ``CYCLEGAN3D_BACKEND=python``
to force the NumPy fallback.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKEND = "cython" if _ckernels is not None and os.environ.get("CYCLEGAN3D_BACKEND", "").lower() != "python" \
    else "python"
_impl = _ckernels if BACKEND == "cython" else _pykernels


def cython_available():
    return _ckernels is not None


def _resolve(impl):
    if impl is None:
        return _impl
    if impl == "python":
        return _pykernels
    if impl == "cython":
        if _ckernels is None:
            raise ImportError("the compiled kernel extension is not built")
        return _ckernels
    return impl


def vol2col(x, kernel, stride, out_shape, impl=None):
    """Gather sliding (kd, kh, kw) windows of a padded (n, c, d, h, w) array.

    Returns an array of shape (n, c*kd*kh*kw, od*oh*ow).
    """
    impl = _resolve(impl)
    x = np.ascontiguousarray(x)
    return impl.vol2col(x, *kernel, *stride, *out_shape)


def col2vol(cols, vol_shape, kernel, stride, out_shape, impl=None):
    """Scatter-add a column matrix back onto a zero (n, c, d, h, w) grid.

    Adjoint of :func:`vol2col`.
    """
    impl = _resolve(impl)
    cols = np.ascontiguousarray(cols)
    _, c, d, h, w = vol_shape
    return impl.col2vol(cols, c, d, h, w, *kernel, *stride, *out_shape)
