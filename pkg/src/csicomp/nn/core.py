"""Parameters and shared helpers for the differentiable layer set."""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NumericError

DTYPE = np.float32


class Parameter:
    """A named trainable array plus its accumulated gradient.

    The gradient always has the same shape as the value and is zeroed at the
    start of every optimization step before new contributions accumulate.
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def require_rank4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (batch, channels, height, width), got shape {x.shape}")
