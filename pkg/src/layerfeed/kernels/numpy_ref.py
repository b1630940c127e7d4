"""Pure-NumPy reference implementations of the convolution patch transforms.

These are the import-time fallback when the compiled extension is missing
and the ground truth the extension is tested against.

Patch matrices use the layout [C*kh*kw, N*OH*OW] so a whole batch convolves
as one matrix product.
"""

import numpy as np


def conv_output_size(extent: int, kernel: int, stride: int, pad: int) -> int:
    span = extent + 2 * pad - kernel
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"kernel {kernel} with stride {stride} and padding {pad} does not "
            f"tile an extent of {extent}"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[N,C,H,W] -> [C*kh*kw, N*OH*OW] patch matrix (zero padding)."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, oh * ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3).reshape(c, n, oh * ow)
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(
    cols: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int,
    pad: int,
) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch columns back onto the input grid."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w].copy()
    return xp
