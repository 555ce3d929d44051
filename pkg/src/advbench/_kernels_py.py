"""Numpy reference kernels for the convolution and pooling primitives.

Same signatures as the compiled ``_kernels`` extension. Accumulation happens
in float64; outputs are cast back to the input dtype.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w):
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.tensordot(win.astype(np.float64), w.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=x.dtype)


def conv2d_backward_input(gout, w, in_h, in_w):
    kh, kw = w.shape[2], w.shape[3]
    padded = np.pad(gout.astype(np.float64), ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    win = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    flipped = w[:, :, ::-1, ::-1].astype(np.float64)
    gx = np.tensordot(win, flipped, axes=([1, 4, 5], [0, 2, 3]))
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)[:, :, :in_h, :in_w], dtype=gout.dtype)


def conv2d_backward_weight(x, gout, kh, kw):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3)).astype(np.float64)
    gw = np.tensordot(gout.astype(np.float64), win, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(gw, dtype=x.dtype)


def maxpool2x2_forward(x):
    """Return (pooled, argmax) where argmax is the window-local flat index 0..3.

    Ties go to the lowest index, which is also the lowest global flat index.
    """
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, :, : ho * 2, : wo * 2].reshape(n, c, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = np.argmax(blocks, axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(gout, idx, in_h, in_w):
    n, c, ho, wo = gout.shape
    onehot = (idx[..., None] == np.arange(4, dtype=np.int8)).astype(gout.dtype)
    blocks = onehot * gout[..., None]
    blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
    gx = np.zeros((n, c, in_h, in_w), dtype=gout.dtype)
    gx[:, :, : ho * 2, : wo * 2] = blocks
    return gx
