"""Numpy implementations of the hot kernels (fallback when the extension is absent)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _sigmoid(v):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-v))


def dw_forward(xp, w, stride, ho, wo):
    k = w.shape[1]
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]
            out += patch * w[None, :, ki, kj, None, None]
    return out


def dw_backward(xp, w, gout, stride):
    k = w.shape[1]
    ho, wo = gout.shape[2], gout.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros(w.shape, dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            rs = slice(ki, ki + stride * (ho - 1) + 1, stride)
            cs = slice(kj, kj + stride * (wo - 1) + 1, stride)
            gw[:, ki, kj] = np.einsum("ncij,ncij->c", gout, xp[:, :, rs, cs], dtype=np.float64)
            gxp[:, :, rs, cs] += gout * w[None, :, ki, kj, None, None]
    return gxp, gw.astype(xp.dtype)


def im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def col2im(cols, channels, hp, wp, k, stride, ho, wo):
    n = cols.shape[0]
    out = np.zeros((n, channels, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(n, channels, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += blocks[:, :, ki, kj]
    return out


def lstm_cell_forward(z, c_prev):
    h = c_prev.shape[1]
    act = np.empty_like(z)
    act[:, :h] = _sigmoid(z[:, :h])
    act[:, h:2 * h] = _sigmoid(z[:, h:2 * h])
    act[:, 2 * h:3 * h] = np.tanh(z[:, 2 * h:3 * h])
    act[:, 3 * h:] = _sigmoid(z[:, 3 * h:])
    c = act[:, h:2 * h] * c_prev + act[:, :h] * act[:, 2 * h:3 * h]
    tc = np.tanh(c)
    return act, c, tc, act[:, 3 * h:] * tc


def lstm_cell_backward(act, c_prev, tc, dh, dc_next):
    h = c_prev.shape[1]
    ig, fg, gg, og = act[:, :h], act[:, h:2 * h], act[:, 2 * h:3 * h], act[:, 3 * h:]
    dc = dh * og * (1.0 - tc * tc) + dc_next
    dz = np.empty_like(act)
    dz[:, :h] = dc * gg * ig * (1.0 - ig)
    dz[:, h:2 * h] = dc * c_prev * fg * (1.0 - fg)
    dz[:, 2 * h:3 * h] = dc * ig * (1.0 - gg * gg)
    dz[:, 3 * h:] = dh * tc * og * (1.0 - og)
    return dz, dc * fg
