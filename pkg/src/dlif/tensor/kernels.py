"""Hot convolution kernels with a compiled backend and a numpy fallback.

The compiled module ``dlif._ckernels`` is used when it imports; setting
``DLIF_PURE_PYTHON=1`` forces the numpy path.  Both produce identical values.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col_numpy(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Unfold ``x`` (N, C, H, W) into rows of shape (N*OH*OW, C*kh*kw)."""
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(n * oh * ow, c * kh * kw)


def col2im_numpy(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add rows produced by :func:`im2col_numpy` back to (N, C, H, W)."""
    n, c, h, w = shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    blocks = cols.reshape(n, oh, ow, c, kh, kw)
    dx = np.zeros(shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dx


def _load_backend():
    if os.environ.get("DLIF_PURE_PYTHON") == "1":
        return "numpy", im2col_numpy, col2im_numpy
    try:
        from dlif import _ckernels
    except ImportError:
        return "numpy", im2col_numpy, col2im_numpy

    def im2col_c(x, kh, kw, stride):
        return _ckernels.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride)

    def col2im_c(cols, shape, kh, kw, stride):
        return _ckernels.col2im(np.ascontiguousarray(cols, dtype=np.float64), tuple(shape), kh, kw, stride)

    return "cython", im2col_c, col2im_c


BACKEND, im2col, col2im = _load_backend()
