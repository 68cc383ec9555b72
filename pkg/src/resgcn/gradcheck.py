"""Central finite-difference checks against tape gradients."""
from __future__ import annotations

import numpy as np

from . import tensor as T


def numerical_grad(loss_fn, param, h=1e-5):
    """d loss_fn() / d param by central differences; ``param.data`` is perturbed in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(loss_fn().data)
        flat[i] = old - h
        down = float(loss_fn().data)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def tape_grads(loss_fn, params):
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        p.grad[...] = 0.0
    with T.Tape() as tape:
        loss = loss_fn()
        T.backward(loss, tape)
    return [p.grad.copy() for p in params]


def relative_error(analytic, numeric, floor=1e-8):
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(loss_fn, params, h=1e-5, floor=1e-8, scale_floor=1e-4):
    """Max per-coordinate relative error for each parameter, in ``params`` order.

    The denominator floor is ``max(floor, scale_floor * max|numeric|)`` so that
    coordinates many orders below the tensor's largest gradient, where central
    differences carry only rounding noise, do not dominate the result.
    """
    analytic = tape_grads(loss_fn, params)
    out = []
    for a, p in zip(analytic, params):
        n = numerical_grad(loss_fn, p, h)
        fl = max(floor, scale_floor * float(np.abs(n).max(initial=0.0)))
        out.append(float(relative_error(a, n, fl).max()))
    return out
