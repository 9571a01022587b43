"""Differentiable operators over :class:`Tensor`.

Layout is NCHW throughout. Reductions that feed statistics (batch-norm
moments, pooling means, bias gradients, the loss) accumulate in float64 and
cast back to the storage dtype.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a = _t(a)
    b = _t(b, like=a)
    out = a.data + b.data

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), _bw, "add")


def mul(a, b):
    a = _t(a)
    b = _t(b, like=a)
    out = a.data * b.data

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(out, (a, b), _bw, "mul")


def scale(a, factor):
    a = _t(a)
    f = a.data.dtype.type(factor)
    return Tensor.from_op(a.data * f, (a,), lambda g: (g * f,), "scale")


def average(a, b):
    """Elementwise mean ``(a + b) / 2``."""
    half = a.data.dtype.type(0.5)
    out = (a.data + b.data) * half
    return Tensor.from_op(out, (a, b), lambda g: (g * half, g * half), "average")


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))
    return Tensor.from_op(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    with np.errstate(over="ignore"):
        out = (1.0 / (1.0 + np.exp(-x.data))).astype(x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(x):
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


# -- shape ops ---------------------------------------------------------------

def reshape(x, shape):
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def getitem(x, idx):
    out = x.data[idx]

    def _bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor.from_op(np.array(out, copy=True), (x,), _bw, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(out, tuple(tensors), _bw, "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def _bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(out, tuple(tensors), _bw, "stack")


# -- reductions --------------------------------------------------------------

def sum(x):
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (np.full_like(x.data, g),), "sum")


def mean(x):
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (np.full_like(x.data, g / n),), "mean")


# -- dense -------------------------------------------------------------------

def matmul(a, b):
    out = a.data @ b.data
    return Tensor.from_op(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) and ``weight`` (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    def _bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _bw, "linear")


# -- convolution -------------------------------------------------------------

def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, pad=0, groups=1):
    """Grouped 2-D cross-correlation.

    ``weight`` has shape (Co, Ci/groups, K, K); output channel block j only
    reads input channel block j.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D (Co,Ci/g,K,K), got shape {weight.shape}")
    n, ci, h, w = x.shape
    co, cig, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if groups < 1 or ci % groups:
        raise ValueError(f"conv2d: input channels {ci} not divisible by groups {groups}")
    if co % groups:
        raise ValueError(f"conv2d: output channels {co} not divisible by groups {groups}")
    if cig != ci // groups:
        raise ValueError(f"conv2d: weight in-channels {cig} != input channels {ci} / groups {groups}")
    if k > h + 2 * pad:
        raise ValueError(f"conv2d: kernel {k} exceeds padded height {h + 2 * pad}")
    if k > w + 2 * pad:
        raise ValueError(f"conv2d: kernel {k} exceeds padded width {w + 2 * pad}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")

    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2], xp.shape[3]

    depthwise = groups == ci == co and cig == 1
    pointwise = k == 1 and stride == 1 and pad == 0
    if depthwise:
        out = kernels.dw_forward(xp, weight.data[:, 0], stride, ho, wo)
        cols = None
    elif pointwise:
        cols = None
        xr = x.data.reshape(n, ci, h * w)
        out = np.empty((n, co, h * w), dtype=x.dtype)
        cog = co // groups
        for gi in range(groups):
            wg = weight.data[gi * cog:(gi + 1) * cog, :, 0, 0]
            out[:, gi * cog:(gi + 1) * cog] = np.matmul(wg, xr[:, gi * cig:(gi + 1) * cig])
        out = out.reshape(n, co, ho, wo)
    else:
        cols = kernels.im2col(xp, k, stride, ho, wo)  # (N, Ci*K*K, L)
        out = np.empty((n, co, ho * wo), dtype=x.dtype)
        cog = co // groups
        rows = cig * k * k
        for gi in range(groups):
            wg = weight.data[gi * cog:(gi + 1) * cog].reshape(cog, rows)
            out[:, gi * cog:(gi + 1) * cog] = np.matmul(wg, cols[:, gi * rows:(gi + 1) * rows])
        out = out.reshape(n, co, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _bw(g):
        g = np.ascontiguousarray(g)
        if depthwise:
            gxp, gw = kernels.dw_backward(xp, weight.data[:, 0], g, stride)
            gw = gw[:, None]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        elif pointwise:
            gr = g.reshape(n, co, h * w)
            xr = x.data.reshape(n, ci, h * w)
            gx = np.empty_like(xr)
            gw = np.empty_like(weight.data)
            cog = co // groups
            for gi in range(groups):
                gg = gr[:, gi * cog:(gi + 1) * cog]
                wg = weight.data[gi * cog:(gi + 1) * cog, :, 0, 0]
                gx[:, gi * cig:(gi + 1) * cig] = np.matmul(wg.T, gg)
                gw[gi * cog:(gi + 1) * cog, :, 0, 0] = np.tensordot(gg, xr[:, gi * cig:(gi + 1) * cig], axes=([0, 2], [0, 2]))
            gx = gx.reshape(x.shape)
        else:
            gr = g.reshape(n, co, ho * wo)
            gcols = np.empty_like(cols)
            gw = np.empty_like(weight.data)
            cog = co // groups
            rows = cig * k * k
            for gi in range(groups):
                gg = gr[:, gi * cog:(gi + 1) * cog]
                wg = weight.data[gi * cog:(gi + 1) * cog].reshape(cog, rows)
                gcols[:, gi * rows:(gi + 1) * rows] = np.matmul(wg.T, gg)
                gw[gi * cog:(gi + 1) * cog] = np.tensordot(gg, cols[:, gi * rows:(gi + 1) * rows], axes=([0, 2], [0, 2])).reshape(cog, cig, k, k)
            gxp = kernels.col2im(gcols, ci, hp, wp, k, stride, ho, wo)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _bw, "conv2d")


def depthwise_conv2d(x, weight, bias=None, stride=1, pad=0):
    """One K x K kernel per channel: ``conv2d`` with groups equal to the channel count."""
    return conv2d(x, weight, bias, stride=stride, pad=pad, groups=x.shape[1])


# -- normalization / pooling / regularization --------------------------------

class BatchNormStats:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm2d(x, gamma, beta, stats, training):
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d: expected per-channel parameters of length {c}")
    eps = stats.eps
    if training:
        count = n * h * w
        if count == 1:
            raise ValueError("batch_norm2d: batch statistics undefined for a single value per channel")
        xd = x.data.astype(np.float64)
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = stats.momentum
        stats.mean[...] = (1 - m) * stats.mean + m * mu
        stats.var[...] = (1 - m) * stats.var + m * var * count / (count - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat64 = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        xhat = xhat64.astype(x.dtype)
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

        def _bw(g):
            gd = g.astype(np.float64)
            gbeta = gd.sum(axis=(0, 2, 3))
            ggamma = (gd * xhat64).sum(axis=(0, 2, 3))
            gxhat = gd * gamma.data.astype(np.float64)[None, :, None, None]
            gx = (inv[None, :, None, None] / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat64 * (gxhat * xhat64).sum(axis=(0, 2, 3))[None, :, None, None]
            )
            return gx.astype(x.dtype), ggamma.astype(gamma.dtype), gbeta.astype(beta.dtype)
    else:
        inv = (1.0 / np.sqrt(stats.var.astype(np.float64) + eps)).astype(x.dtype)
        xhat = (x.data - stats.mean[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

        def _bw(g):
            gx = g * (gamma.data * inv)[None, :, None, None]
            ggamma = (g.astype(np.float64) * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype)
            gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(beta.dtype)
            return gx, ggamma, gbeta

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), _bw, "batch_norm2d")


def pool_bounds(size, out):
    """Index ranges ``[floor(i*size/out), floor((i+1)*size/out))`` for each output cell."""
    return [((i * size) // out, ((i + 1) * size) // out) for i in range(out)]


def adaptive_avg_pool2d(x, out_hw):
    oh, ow = out_hw
    n, c, h, w = x.shape
    if oh < 1 or ow < 1 or oh > h or ow > w:
        raise ValueError(f"adaptive_avg_pool2d: cannot pool {h}x{w} to {oh}x{ow}")
    rb, cb = pool_bounds(h, oh), pool_bounds(w, ow)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3), dtype=np.float64)

    def _bw(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / area)[:, :, None, None]
        return (gx,)

    return Tensor.from_op(out, (x,), _bw, "adaptive_avg_pool2d")


def dropout(x, p, training, rng=None):
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- loss --------------------------------------------------------------------

def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be (N, C), got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"got {labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    lsm = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -lsm[rows, labels].mean()

    def _bw(g):
        probs = np.exp(lsm)
        probs[rows, labels] -= 1.0
        return ((probs * (float(g) / n)).astype(logits.dtype),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), _bw, "softmax_cross_entropy")
