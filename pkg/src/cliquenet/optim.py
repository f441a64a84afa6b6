"""Initialization and SGD with Nesterov momentum, weight decay, step schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import UsageError
from .tensor import Parameter

MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4
BASE_LR = 0.1


def initialize_parameter(param: Parameter, rng: np.random.Generator) -> None:
    """Draw a parameter's values according to its role.

    Conv kernels: He normal with std sqrt(2 / fan_in), fan_in = C_in*kH*kW.
    Dense weights: Xavier uniform over +/- sqrt(6 / (fan_in + fan_out)).
    Batchnorm scale starts at one; shifts and biases at zero.
    """
    shape = param.data.shape
    dtype = param.data.dtype
    if param.role == "conv":
        fan_in = shape[1] * shape[2] * shape[3]
        std = math.sqrt(2.0 / fan_in)
        param.data = (rng.standard_normal(shape) * std).astype(dtype)
    elif param.role == "dense_weight":
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
        param.data = rng.uniform(-limit, limit, shape).astype(dtype)
    elif param.role == "bn_gamma":
        param.data = np.ones(shape, dtype=dtype)
    else:  # dense_bias, bn_beta
        param.data = np.zeros(shape, dtype=dtype)


def init_params(model, rng: np.random.Generator):
    """Re-initialize every registered parameter in registration order and
    reset batchnorm running statistics."""
    for param in model.parameters():
        initialize_parameter(param, rng)
    for state in model.bn_states().values():
        state.running_mean[...] = 0.0
        state.running_var[...] = 1.0
    return model


class SGDNesterov:
    """SGD with Nesterov momentum in look-ahead form.

    With g' = g + weight_decay * w:
        v <- momentum * v - lr * g'
        w <- w + momentum * v - lr * g'
    Applied uniformly to every parameter, batchnorm affine included.
    """

    def __init__(
        self,
        params: dict[str, Parameter],
        momentum: float = MOMENTUM,
        weight_decay: float = WEIGHT_DECAY,
    ):
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {
            name: np.zeros_like(p.data) for name, p in self.params.items()
        }

    def step(self, lr: float) -> None:
        mu, wd = self.momentum, self.weight_decay
        for name, p in self.params.items():
            if p.grad is None:
                raise UsageError(f"parameter {name} has no gradient; run backward first")
            g = p.grad
            if wd:
                g = g + wd * p.data
            v = self.velocity[name]
            v *= mu
            v -= lr * g
            p.data += mu * v - lr * g

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def lr_at(
    epoch: int,
    total_epochs: int,
    base_lr: float = BASE_LR,
    milestones: list[int] | None = None,
    gamma: float = 0.1,
) -> float:
    """Step schedule: base_lr divided by 10 at 50% and 75% of training.

    ``milestones`` overrides the fractional boundaries with explicit epochs
    (e.g. [30, 60, 90]); the rate is multiplied by ``gamma`` at each one.
    """
    if not 0 <= epoch < total_epochs:
        raise UsageError(f"epoch {epoch} outside [0, {total_epochs})")
    if milestones is None:
        milestones = [
            math.floor(0.5 * total_epochs),
            math.floor(0.75 * total_epochs),
        ]
    drops = sum(1 for m in milestones if epoch >= m)
    return base_lr * gamma**drops
