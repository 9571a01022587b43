"""Stacked LSTM over a (T, N, F) sequence.

Each layer holds one weight matrix of shape (4H, H+F) acting on the
concatenation ``[h_{t-1}, x_t]`` and one bias of length 4H. Gate rows are
ordered input ``i``, forget ``f``, candidate ``g`` (the tanh branch), output
``o``::

    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)
"""
from __future__ import annotations

import numpy as np

from . import functional as F
from . import kernels
from .tensor import Tensor


def lstm_param_count(input_size, hidden, layers):
    total = 0
    for layer in range(layers):
        fin = input_size if layer == 0 else hidden
        total += 4 * (fin + hidden + 1) * hidden
    return total


def lstm_layer(x, weight, bias):
    """Run one LSTM layer from zero initial state; returns the hidden sequence (T, N, H)."""
    if x.ndim != 3:
        raise ValueError(f"lstm: input must be (T, N, F), got shape {x.shape}")
    t_len, n, f_in = x.shape
    four_h, cols = weight.shape
    h = four_h // 4
    if four_h != 4 * h or h < 1:
        raise ValueError(f"lstm: weight rows {four_h} not a positive multiple of 4")
    if cols != h + f_in:
        raise ValueError(f"lstm: weight columns {cols} != hidden {h} + input features {f_in}")
    if bias.shape != (four_h,):
        raise ValueError(f"lstm: bias shape {bias.shape} != ({four_h},)")

    dt = x.dtype
    w = weight.data
    b = bias.data
    h_prev = np.zeros((n, h), dtype=dt)
    c_prev = np.zeros((n, h), dtype=dt)
    inputs, acts, cells, tcs, hs = [], [], [], [], []
    for t in range(t_len):
        hx = np.concatenate([h_prev, x.data[t]], axis=1)
        z = hx @ w.T + b
        act, c, tc, h_t = kernels.lstm_cell_forward(z.astype(dt, copy=False), c_prev)
        inputs.append(hx)
        acts.append(act)
        cells.append(c_prev)
        tcs.append(tc)
        hs.append(h_t)
        h_prev, c_prev = h_t, c
    out = np.stack(hs)

    def _bw(g):
        gw = np.zeros(w.shape, dtype=np.float64)
        gb = np.zeros(b.shape, dtype=np.float64)
        gx = np.empty_like(x.data)
        dh_next = np.zeros((n, h), dtype=dt)
        dc_next = np.zeros((n, h), dtype=dt)
        for t in reversed(range(t_len)):
            dh = g[t] + dh_next
            dz, dc_next = kernels.lstm_cell_backward(acts[t], cells[t], tcs[t], dh.astype(dt, copy=False), dc_next)
            gw += dz.T @ inputs[t]
            gb += dz.sum(axis=0, dtype=np.float64)
            dhx = dz @ w
            dh_next = dhx[:, :h]
            gx[t] = dhx[:, h:]
        return gx, gw.astype(w.dtype), gb.astype(b.dtype)

    return Tensor.from_op(out, (x, weight, bias), _bw, "lstm_layer")


def lstm_forward(x, layer_params):
    """Stacked LSTM.

    ``layer_params`` is a sequence of ``(weight, bias)`` pairs, bottom layer
    first. Returns ``(outputs, h_last)``: the top layer's hidden sequence
    (T, N, H) and the final hidden state of every layer (L, N, H).
    """
    if len(layer_params) < 1:
        raise ValueError("lstm: need at least one layer")
    seq = x
    finals = []
    for weight, bias in layer_params:
        seq = lstm_layer(seq, weight, bias)
        finals.append(F.getitem(seq, -1))
    return seq, F.stack(finals)
