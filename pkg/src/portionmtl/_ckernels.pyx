# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and pooling kernels.

Same contracts and accumulation order as ``_pykernels``.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv_output_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(const double[:, :, :, :] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n * ho * wo, c * kh * kw))
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, oh, ow, ch, i, j, row, col, y, xx
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                row = (b * ho + oh) * wo + ow
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        y = oh * stride + i - pad
                        for j in range(kw):
                            xx = ow * stride + j - pad
                            if 0 <= y < h and 0 <= xx < w:
                                cols[row, col] = x[b, ch, y, xx]
                            col += 1
    return out


def col2im(cols, shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    # (N*Ho*Wo, C*kh*kw) -> (N, C, kh, kw, Ho, Wo) so the inner loop is contiguous
    cdef const double[:, :, :, :, :, ::1] src = np.ascontiguousarray(
        np.asarray(cols).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
    out = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, y, xx
    # per (b, ch), the (i, j) loops enclose the spatial loops, so every output
    # cell sums its terms in (i, j) order, as in the numpy fallback
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    for oh in range(ho):
                        y = oh * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for ow in range(wo):
                            xx = ow * stride + j - pad
                            if 0 <= xx < w:
                                dx[b, ch, y, xx] += src[b, ch, i, j, oh, ow]
    return out


def maxpool_forward(const double[:, :, :, :] x, Py_ssize_t k):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // k, wo = x.shape[3] // k
    out = np.empty((n, c, ho, wo))
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, ::1] ix = idx
    cdef Py_ssize_t b, ch, oh, ow, i, j, best
    cdef double v, m
    for b in range(n):
        for ch in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    m = x[b, ch, oh * k, ow * k]
                    best = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, oh * k + i, ow * k + j]
                            if v > m:
                                m = v
                                best = i * k + j
                    o[b, ch, oh, ow] = m
                    ix[b, ch, oh, ow] = best
    return out, idx


def maxpool_backward(const double[:, :, :, :] gout, const cnp.int64_t[:, :, :, :] idx,
                     shape, Py_ssize_t k):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    out = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, oh, ow, best
    for b in range(n):
        for ch in range(c):
            for oh in range(h // k):
                for ow in range(w // k):
                    best = idx[b, ch, oh, ow]
                    dx[b, ch, oh * k + best // k, ow * k + best % k] = gout[b, ch, oh, ow]
    return out
