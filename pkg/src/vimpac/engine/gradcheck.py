"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import backward


def numerical_grads(f, params, eps=1e-5):
    """Central differences of the scalar ``f()`` w.r.t. every coordinate of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = float(f().data)
            flat[k] = orig - eps
            lo = float(f().data)
            flat[k] = orig
            gflat[k] = (hi - lo) / (2.0 * eps)
        out.append(g)
    return out


def analytic_grads(f, params):
    for p in params:
        p.grad = None
    backward(f(), params=params)
    return [p.grad.copy() for p in params]


def relative_errors(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def finite_diff_check(f, params, eps=1e-5, report=False):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` takes no arguments and must rebuild its graph from the current
    parameter values on each call. With ``report=True`` also return a list of
    ``(index, max error, argmax coordinate)`` per parameter.
    """
    params = list(params)
    ana = analytic_grads(f, params)
    num = numerical_grads(f, params, eps)
    worst, rows = 0.0, []
    for k, (a, n) in enumerate(zip(ana, num)):
        err = relative_errors(a, n)
        e = float(err.max()) if err.size else 0.0
        rows.append((k, e, np.unravel_index(int(err.argmax()), err.shape) if err.size else ()))
        worst = max(worst, e)
    return (worst, rows) if report else worst
