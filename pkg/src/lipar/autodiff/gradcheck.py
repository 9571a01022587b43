"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward
from . import functional as F


def numeric_grad(fn, arrays, index, step=1e-3):
    """Central-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(*base)
        flat[i] = orig - step
        lo = fn(*base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    denom = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(op, arrays, step=1e-3, seed=0):
    """Compare analytic and numeric gradients of ``sum(op(*tensors) * R)``.

    ``R`` is a fixed random projection so every output element contributes.
    Returns the relative error per input, in float64.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a, dtype=np.float64) for a in arrays])
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(probe.shape)

    def scalar(*arrs):
        out = op(*[Tensor(a, dtype=np.float64) for a in arrs])
        return float(np.sum(out.data * proj))

    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = F.sum(F.mul(op(*tensors), Tensor(proj, dtype=np.float64)))
    backward(loss)
    errors = []
    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, i, step=step)
        errors.append(relative_error(t.grad, num))
    return errors
