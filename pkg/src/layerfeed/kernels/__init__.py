"""Hot-kernel selection: compiled Cython loops when available, NumPy otherwise.

Set LAYERFEED_PURE=1 to force the NumPy path (used by the test suite and the
benchmark to compare both implementations).
"""

import os

import numpy as np

from .numpy_ref import conv_output_size
from .numpy_ref import col2im as _np_col2im
from .numpy_ref import im2col as _np_im2col

try:
    from . import _convkernels as _cy
except ImportError:
    _cy = None

COMPILED_AVAILABLE = _cy is not None
ACTIVE_IMPL = "numpy"


def _cy_im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    out = np.empty((c * kh * kw, n * oh * ow), dtype=x.dtype)
    _cy.im2col_into(np.ascontiguousarray(x), kh, kw, stride, pad, out)
    return out


def _cy_col2im(cols, x_shape, kh, kw, stride, pad):
    # validates kernel geometry against x_shape before the raw loops run
    conv_output_size(x_shape[2], kh, stride, pad)
    conv_output_size(x_shape[3], kw, stride, pad)
    out = np.zeros(x_shape, dtype=cols.dtype)
    _cy.col2im_into(np.ascontiguousarray(cols), kh, kw, stride, pad, out)
    return out


if COMPILED_AVAILABLE and not os.environ.get("LAYERFEED_PURE"):
    im2col = _cy_im2col
    col2im = _cy_col2im
    ACTIVE_IMPL = "cython"
else:
    im2col = _np_im2col
    col2im = _np_col2im

numpy_im2col = _np_im2col
numpy_col2im = _np_col2im
