# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the autodiff engine.

Every function here has a numpy twin in ``_pykernels`` with the same
signature; ``kernels`` picks one at import time.
"""
import numpy as np

from libc.math cimport exp, expf, tanh

ctypedef fused real:
    float
    double


cdef inline double _sigmoid(double v) noexcept nogil:
    if v >= 0:
        return 1.0 / (1.0 + exp(-v))
    cdef double e = exp(v)
    return e / (1.0 + e)


# single precision inputs use the float libm routines, which vectorize better
cdef inline real _sig(real v) noexcept nogil:
    cdef real e
    if real is float:
        if v >= 0:
            return 1.0 / (1.0 + expf(-v))
        e = expf(v)
        return e / (1.0 + e)
    else:
        return _sigmoid(v)


cdef inline real _tanh(real v) noexcept nogil:
    # tanh(v) = 2 sigmoid(2v) - 1 keeps the float path on expf, much cheaper than tanhf
    if real is float:
        return 2.0 * _sig(2.0 * v) - 1.0
    else:
        return tanh(v)


def dw_forward(const real[:, :, :, ::1] xp, const real[:, :, ::1] w, int stride, int ho, int wo):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1], K = w.shape[1]
    cdef Py_ssize_t n, c, i, j, ki, kj, r0, c0
    cdef double acc
    out = np.empty((N, C, ho, wo), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(ho):
                    r0 = i * stride
                    for j in range(wo):
                        c0 = j * stride
                        acc = 0.0
                        for ki in range(K):
                            for kj in range(K):
                                acc = acc + xp[n, c, r0 + ki, c0 + kj] * w[c, ki, kj]
                        o[n, c, i, j] = <real>acc
    return out


def dw_backward(const real[:, :, :, ::1] xp, const real[:, :, ::1] w,
                const real[:, :, :, ::1] gout, int stride):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1], K = w.shape[1]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    cdef Py_ssize_t n, c, i, j, ki, kj, r0, c0
    cdef double g
    dt = np.float32 if real is float else np.float64
    gxp = np.zeros((N, C, xp.shape[2], xp.shape[3]), dtype=dt)
    gw_acc = np.zeros((C, K, K), dtype=np.float64)
    cdef real[:, :, :, ::1] gx = gxp
    cdef double[:, :, ::1] gw = gw_acc
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(ho):
                    r0 = i * stride
                    for j in range(wo):
                        c0 = j * stride
                        g = gout[n, c, i, j]
                        if g == 0.0:
                            continue
                        for ki in range(K):
                            for kj in range(K):
                                gw[c, ki, kj] += g * xp[n, c, r0 + ki, c0 + kj]
                                gx[n, c, r0 + ki, c0 + kj] += <real>(g * w[c, ki, kj])
    return gxp, gw_acc.astype(dt)


def im2col(const real[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t n, c, i, j, ki, kj, row
    out = np.empty((N, C * k * k, ho * wo), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] o = out
    with nogil:
        for n in range(N):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for i in range(ho):
                            for j in range(wo):
                                o[n, row, i * wo + j] = xp[n, c, i * stride + ki, j * stride + kj]
    return out


def col2im(const real[:, :, ::1] cols, int channels, int hp, int wp, int k, int stride, int ho, int wo):
    cdef Py_ssize_t N = cols.shape[0]
    cdef Py_ssize_t n, c, i, j, ki, kj, row
    out = np.zeros((N, channels, hp, wp), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for n in range(N):
            for c in range(channels):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for i in range(ho):
                            for j in range(wo):
                                o[n, c, i * stride + ki, j * stride + kj] += cols[n, row, i * wo + j]
    return out


def lstm_cell_forward(const real[:, ::1] z, const real[:, ::1] c_prev):
    """Gate nonlinearities and state update for one step, gate order i, f, g, o."""
    cdef Py_ssize_t N = c_prev.shape[0], H = c_prev.shape[1]
    cdef Py_ssize_t n, j
    cdef real ig, fg, gg, og, cc, tc
    dt = np.float32 if real is float else np.float64
    act_a = np.empty((N, 4 * H), dtype=dt)
    c_a = np.empty((N, H), dtype=dt)
    tc_a = np.empty((N, H), dtype=dt)
    h_a = np.empty((N, H), dtype=dt)
    cdef real[:, ::1] act = act_a
    cdef real[:, ::1] cv = c_a
    cdef real[:, ::1] tcv = tc_a
    cdef real[:, ::1] hv = h_a
    with nogil:
        for n in range(N):
            for j in range(H):
                ig = _sig(z[n, j])
                fg = _sig(z[n, H + j])
                gg = _tanh(z[n, 2 * H + j])
                og = _sig(z[n, 3 * H + j])
                cc = fg * c_prev[n, j] + ig * gg
                tc = _tanh(cc)
                act[n, j] = ig
                act[n, H + j] = fg
                act[n, 2 * H + j] = gg
                act[n, 3 * H + j] = og
                cv[n, j] = cc
                tcv[n, j] = tc
                hv[n, j] = og * tc
    return act_a, c_a, tc_a, h_a


def lstm_cell_backward(const real[:, ::1] act, const real[:, ::1] c_prev, const real[:, ::1] tc,
                       const real[:, ::1] dh, const real[:, ::1] dc_next):
    cdef Py_ssize_t N = c_prev.shape[0], H = c_prev.shape[1]
    cdef Py_ssize_t n, j
    cdef double ig, fg, gg, og, t, dc
    dt = np.float32 if real is float else np.float64
    dz_a = np.empty((N, 4 * H), dtype=dt)
    dcp_a = np.empty((N, H), dtype=dt)
    cdef real[:, ::1] dz = dz_a
    cdef real[:, ::1] dcp = dcp_a
    with nogil:
        for n in range(N):
            for j in range(H):
                ig = act[n, j]
                fg = act[n, H + j]
                gg = act[n, 2 * H + j]
                og = act[n, 3 * H + j]
                t = tc[n, j]
                dc = dh[n, j] * og * (1.0 - t * t) + dc_next[n, j]
                dz[n, j] = <real>(dc * gg * ig * (1.0 - ig))
                dz[n, H + j] = <real>(dc * c_prev[n, j] * fg * (1.0 - fg))
                dz[n, 2 * H + j] = <real>(dc * ig * (1.0 - gg * gg))
                dz[n, 3 * H + j] = <real>(dh[n, j] * t * og * (1.0 - og))
                dcp[n, j] = <real>(dc * fg)
    return dz_a, dcp_a
