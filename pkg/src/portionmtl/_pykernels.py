"""Pure-numpy kernels for convolution and pooling.

These are the fallback used when the compiled ``_ckernels`` extension is not
available. Results are bitwise identical to the compiled versions: both
accumulate ``col2im`` contributions in the same (i, j) order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` (N, C, H, W) into rows of receptive fields.

    Row order is (n, oh, ow); column order is (c, i, j), matching
    ``weight.reshape(F, C * kh * kw)``.
    """
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx)


def maxpool_forward(x, k):
    """Non-overlapping k x k max pooling; ties resolve to the first
    element of the window in row-major order."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    win = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(gout, idx, shape, k):
    n, c, h, w = shape
    ho, wo = h // k, w // k
    win = np.zeros((n, c, ho, wo, k * k))
    np.put_along_axis(win, idx[..., None], gout[..., None], axis=-1)
    dx = win.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return np.ascontiguousarray(dx)
