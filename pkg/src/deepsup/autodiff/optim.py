"""SGD with coupled weight decay, and Glorot initialization."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter, default_dtype


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """One momentum step, then zero the gradients.

    v <- momentum * v + grad + weight_decay * value
    value <- value - lr * v
    """
    for p in params:
        v = p.velocity
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.value.data = (p.data - lr * v).astype(p.data.dtype)
        p.zero_grad()


def fans(shape: tuple[int, ...]) -> tuple[int, int]:
    """(fan_in, fan_out) for FC weights (out, in) and conv weights (out, in, k, k)."""
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    if len(shape) == 1:
        return shape[0], shape[0]
    raise ValueError(f"cannot derive fan-in/fan-out from shape {shape}")


def glorot_bound(shape: tuple[int, ...]) -> float:
    fan_in, fan_out = fans(shape)
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_init(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform samples in +-sqrt(6 / (fan_in + fan_out))."""
    bound = glorot_bound(tuple(shape))
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())
