"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise (or with
``LIPAR_PURE_PYTHON=1``) the numpy versions in ``_pykernels`` run instead.
"""
import contextlib
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if _ckernels is not None and os.environ.get("LIPAR_PURE_PYTHON", "") != "1":
    _active = "cython"
else:
    _active = "python"


def available_backends():
    return sorted(_BACKENDS)


def backend():
    return _active


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = name


@contextlib.contextmanager
def using_backend(name):
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _c(a):
    return np.ascontiguousarray(a)


def dw_forward(xp, w, stride, ho, wo):
    return _BACKENDS[_active].dw_forward(_c(xp), _c(w), int(stride), int(ho), int(wo))


def dw_backward(xp, w, gout, stride):
    return _BACKENDS[_active].dw_backward(_c(xp), _c(w), _c(gout), int(stride))


def im2col(xp, k, stride, ho, wo):
    return _BACKENDS[_active].im2col(_c(xp), int(k), int(stride), int(ho), int(wo))


def col2im(cols, channels, hp, wp, k, stride, ho, wo):
    return _BACKENDS[_active].col2im(_c(cols), int(channels), int(hp), int(wp), int(k), int(stride), int(ho), int(wo))


def lstm_cell_forward(z, c_prev):
    return _BACKENDS[_active].lstm_cell_forward(_c(z), _c(c_prev))


def lstm_cell_backward(act, c_prev, tc, dh, dc_next):
    return _BACKENDS[_active].lstm_cell_backward(_c(act), _c(c_prev), _c(tc), _c(dh), _c(dc_next))
