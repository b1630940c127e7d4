# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Tight loops for the convolution patch transforms.

Patch matrices use the layout [C*kh*kw, N*OH*OW] so a whole batch convolves
as one matrix product. Both routines operate on pre-allocated outputs so
dtype handling stays in the Python wrapper; zero padding is handled by
splitting each output row into zero-fill head, valid body, and zero-fill
tail, keeping the inner copy loops branch-free.
"""

ctypedef fused floating:
    float
    double


cdef inline Py_ssize_t _valid_lo(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride) nogil:
    if k >= pad:
        return 0
    return (pad - k + stride - 1) // stride


cdef inline Py_ssize_t _valid_hi(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride,
                                 Py_ssize_t extent, Py_ssize_t out_extent) nogil:
    cdef Py_ssize_t hi = (extent + pad - k - 1) // stride + 1
    if hi > out_extent:
        return out_extent
    return hi


def im2col_into(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                Py_ssize_t stride, Py_ssize_t pad, floating[:, ::1] out):
    """Scatter k x k patches into out[(c*kh+i)*kw+j, (n*oh+oi)*ow+oj]."""
    cdef Py_ssize_t n_items = x.shape[0]
    cdef Py_ssize_t channels = x.shape[1]
    cdef Py_ssize_t h = x.shape[2]
    cdef Py_ssize_t w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n, c, i, j, oi, oj, ii, row, lo, hi, off
    cdef floating* xrow
    cdef floating* orow

    # image-outer order keeps each input image cache-resident
    with nogil:
        for n in range(n_items):
            for c in range(channels):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        lo = _valid_lo(j, pad, stride)
                        hi = _valid_hi(j, pad, stride, w, ow)
                        off = j - pad
                        for oi in range(oh):
                            ii = oi * stride + i - pad
                            orow = &out[row, (n * oh + oi) * ow]
                            if ii < 0 or ii >= h:
                                for oj in range(ow):
                                    orow[oj] = 0
                                continue
                            xrow = &x[n, c, ii, 0]
                            for oj in range(lo):
                                orow[oj] = 0
                            for oj in range(lo, hi):
                                orow[oj] = xrow[oj * stride + off]
                            for oj in range(hi, ow):
                                orow[oj] = 0


def col2im_into(floating[:, ::1] cols, Py_ssize_t kh, Py_ssize_t kw,
                Py_ssize_t stride, Py_ssize_t pad, floating[:, :, :, ::1] out):
    """Accumulate patch columns back onto the (zero-initialised) input grid."""
    cdef Py_ssize_t n_items = out.shape[0]
    cdef Py_ssize_t channels = out.shape[1]
    cdef Py_ssize_t h = out.shape[2]
    cdef Py_ssize_t w = out.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n, c, i, j, oi, oj, ii, row, lo, hi, off
    cdef floating* orow
    cdef floating* crow

    with nogil:
        for n in range(n_items):
            for c in range(channels):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        lo = _valid_lo(j, pad, stride)
                        hi = _valid_hi(j, pad, stride, w, ow)
                        off = j - pad
                        for oi in range(oh):
                            ii = oi * stride + i - pad
                            if ii < 0 or ii >= h:
                                continue
                            orow = &out[n, c, ii, 0]
                            crow = &cols[row, (n * oh + oi) * ow]
                            for oj in range(lo, hi):
                                orow[oj * stride + off] += crow[oj]
