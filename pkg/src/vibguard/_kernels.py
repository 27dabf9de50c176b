"""Hot inner loops for convolution and pooling.

Every kernel has a numba version (``*_nb``) and a numpy version (``*_np``);
the public name is bound to one of them at import time according to
``VIBGUARD_BACKEND``. Both produce bit-identical results: the numba loops
visit kernel offsets in the same order the numpy code adds slices.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


def conv_out_size(h, w, kh, kw, pad):
    return h + 2 * pad - kh + 1, w + 2 * pad - kw + 1


# ---------------------------------------------------------------- im2col

def im2col_np(x, kh, kw, pad):
    """(N, C, H, W) -> (N*Ho*Wo, C*kh*kw) patch matrix, stride 1."""
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, w, kh, kw, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, :, :, di, dj] = x[:, :, di:di + ho, dj:dj + wo].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * kh * kw)


@njit
def _im2col_loop(xp, kh, kw, ho, wo, cols):
    n, c = xp.shape[0], xp.shape[1]
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            cols[b, i, j, ch, di, dj] = xp[b, ch, i + di, j + dj]


def im2col_nb(x, kh, kw, pad):
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, w, kh, kw, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=x.dtype)
    _im2col_loop(np.ascontiguousarray(x), kh, kw, ho, wo, cols)
    return cols.reshape(n * ho * wo, c * kh * kw)


# ---------------------------------------------------------------- col2im

def col2im_np(cols, x_shape, kh, kw, pad):
    """Adjoint of im2col: scatter-add patch gradients back onto the image."""
    n, c, h, w = x_shape
    ho, wo = conv_out_size(h, w, kh, kw, pad)
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for di in range(kh):
        for dj in range(kw):
            dx[:, :, di:di + ho, dj:dj + wo] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx)


@njit
def _col2im_loop(cols, kh, kw, ho, wo, dx):
    n, c = dx.shape[0], dx.shape[1]
    # offsets outermost: same accumulation order as col2im_np
    for di in range(kh):
        for dj in range(kw):
            for b in range(n):
                for ch in range(c):
                    for i in range(ho):
                        for j in range(wo):
                            dx[b, ch, i + di, j + dj] += cols[b, i, j, ch, di, dj]


def col2im_nb(cols, x_shape, kh, kw, pad):
    n, c, h, w = x_shape
    ho, wo = conv_out_size(h, w, kh, kw, pad)
    cols = np.ascontiguousarray(cols.reshape(n, ho, wo, c, kh, kw))
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    _col2im_loop(cols, kh, kw, ho, wo, dx)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx)


# ---------------------------------------------------------------- max-pool 2x2

def maxpool2_np(x):
    """2x2/stride-2 max pool. Returns (out, argmax) with argmax in 0..3 (row-major
    inside the window, first maximum wins)."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool2_backward_np(g, arg, x_shape):
    n, c, h, w = x_shape
    h2, w2 = h // 2, w // 2
    win = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    win = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    dx = np.zeros(x_shape, dtype=g.dtype)
    dx[:, :, :2 * h2, :2 * w2] = win
    return dx


@njit
def _maxpool2_loop(x, out, arg):
    n, c, h2, w2 = out.shape
    for b in range(n):
        for ch in range(c):
            for i in range(h2):
                for j in range(w2):
                    best = x[b, ch, 2 * i, 2 * j]
                    k = 0
                    v = x[b, ch, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[b, ch, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        k = 2
                    v = x[b, ch, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = k


@njit
def _maxpool2_back_loop(g, arg, dx):
    n, c, h2, w2 = g.shape
    for b in range(n):
        for ch in range(c):
            for i in range(h2):
                for j in range(w2):
                    k = arg[b, ch, i, j]
                    dx[b, ch, 2 * i + k // 2, 2 * j + k % 2] = g[b, ch, i, j]


def maxpool2_nb(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    arg = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    _maxpool2_loop(np.ascontiguousarray(x), out, arg)
    return out, arg


def maxpool2_backward_nb(g, arg, x_shape):
    dx = np.zeros(x_shape, dtype=g.dtype)
    _maxpool2_back_loop(np.ascontiguousarray(g), arg, dx)
    return dx


if USE_NUMBA:
    im2col, col2im = im2col_nb, col2im_nb
    maxpool2, maxpool2_backward = maxpool2_nb, maxpool2_backward_nb
else:
    im2col, col2im = im2col_np, col2im_np
    maxpool2, maxpool2_backward = maxpool2_np, maxpool2_backward_np
