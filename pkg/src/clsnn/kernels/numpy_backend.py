"""Pure-numpy kernel implementations.

conv2d goes through an im2col buffer so the contraction lands in BLAS;
maxpool2d uses a window reshape plus argmax.  Shapes are validated by the
dispatcher in ``clsnn.kernels``, so these functions assume clean inputs.
"""

import numpy as np


def _im2col(x, k, stride, pad, out_h, out_w):
    # (B, C, k, k, out_h, out_w) patch tensor; one strided slice per (kh, kw)
    b, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, out_h, out_w), dtype=np.float64)
    for kh in range(k):
        for kw in range(k):
            cols[:, :, kh, kw] = x[
                :, :, kh : kh + stride * out_h : stride, kw : kw + stride * out_w : stride
            ]
    return cols


def conv2d_forward(x, w, stride, pad):
    k = w.shape[2]
    out_h = (x.shape[2] + 2 * pad - k) // stride + 1
    out_w = (x.shape[3] + 2 * pad - k) // stride + 1
    cols = _im2col(x, k, stride, pad, out_h, out_w)
    y = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(x, w, gy, stride, pad):
    k = w.shape[2]
    out_h, out_w = gy.shape[2], gy.shape[3]
    cols = _im2col(x, k, stride, pad, out_h, out_w)
    gw = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 4, 5]))

    # scatter column gradients back through the same strided slices
    gcols = np.tensordot(gy, w, axes=([1], [0]))  # (B, out_h, out_w, C, k, k)
    h_pad, w_pad = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
    gx_pad = np.zeros((x.shape[0], x.shape[1], h_pad, w_pad), dtype=np.float64)
    for kh in range(k):
        for kw in range(k):
            gx_pad[
                :, :, kh : kh + stride * out_h : stride, kw : kw + stride * out_w : stride
            ] += gcols[:, :, :, :, kh, kw].transpose(0, 3, 1, 2)
    if pad:
        gx = gx_pad[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]]
    else:
        gx = gx_pad
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)


def _windows(x, k):
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win).reshape(b, c, h // k, w // k, k * k)


def maxpool2d_forward(x, k):
    win = _windows(x, k)
    # argmax returns the first maximum, i.e. the lowest flat index in the window
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2d_backward(gy, idx, x_shape, k):
    b, c, h, w = x_shape
    gwin = np.zeros((b, c, h // k, w // k, k * k), dtype=np.float64)
    np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
    gx = gwin.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx).reshape(b, c, h, w)
