"""Finite-difference verification of analytic gradients.

The checkers re-evaluate a scalar-valued function with each coordinate of a
probe tensor perturbed by +/-eps (central differences) and compare against
the gradient produced by the backward pass. The probed function must be
deterministic: dropout disabled, batchnorm mode fixed.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor

REL_FLOOR = 1e-8


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def finite_difference_check(
    fn: Callable[[Tensor], Tensor], point: Tensor, eps: float
) -> float:
    """Max over coordinates of the relative error between the backward-pass
    gradient of ``fn`` at ``point`` and its central-difference estimate."""
    probe = Tensor(point.data.copy(), requires_grad=True)
    out = fn(probe)
    out.backward()
    analytic = probe.grad.reshape(-1)

    base = point.data.copy()
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(flat[i])  # actually representable step, not the nominal eps
        f_plus = float(fn(Tensor(base.copy())).data)
        flat[i] = orig - eps
        lo = float(flat[i])
        f_minus = float(fn(Tensor(base.copy())).data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (hi - lo)
        worst = max(worst, relative_error(float(analytic[i]), numeric))
    return worst


def finite_difference_params(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float
) -> float:
    """Like :func:`finite_difference_check` but probes a set of parameters
    in place; ``loss_fn`` re-runs the model and must see the live values."""
    params = list(params)
    loss = loss_fn()
    loss.backward()
    analytic = [np.array(p.grad, copy=True).reshape(-1) for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(flat[i])
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(flat[i])
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (hi - lo)
            worst = max(worst, relative_error(float(ana[i]), numeric))
    return worst
