"""Central finite-difference verification of analytic layer gradients."""
from __future__ import annotations

import copy

import numpy as np

from ..errors import ConfigError
from .core import Parameter


def _as_float64(layer):
    """Deep copy of a layer with every float array promoted to float64.

    The copy runs the identical forward/backward code; the promotion only
    removes float32 rounding from the finite-difference quotients, which would
    otherwise swamp the tolerances the checker is asked to certify.
    """
    lay = copy.deepcopy(layer)
    for attr, val in vars(lay).items():
        if isinstance(val, Parameter):
            val.value = val.value.astype(np.float64)
            val.grad = val.grad.astype(np.float64)
        elif isinstance(val, np.ndarray) and np.issubdtype(val.dtype, np.floating):
            setattr(lay, attr, val.astype(np.float64))
    return lay


def gradient_check(layer, x: np.ndarray, step: float = 1e-3,
                   rng: np.random.Generator | None = None,
                   max_coords: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Projects the layer output onto a fixed random direction to obtain a
    scalar loss, runs one analytic backward pass, then perturbs every input
    and parameter coordinate by +-step (or ``max_coords`` random ones per
    tensor when set) and compares.  Inputs should stay clear of activation
    kinks by at least ``step``.  Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-4 <= step <= 1e-2):
        raise ConfigError(f"finite-difference step must lie in [1e-4, 1e-2], got {step}")
    rng = rng or np.random.default_rng(0)
    lay = _as_float64(layer)
    x = np.array(x, dtype=np.float64)

    y = lay.forward(x, train=True)
    direction = rng.standard_normal(y.shape)
    for p in lay.params():
        p.zero_grad()
    dx = lay.backward(direction)

    def loss() -> float:
        return float((lay.forward(x, train=True) * direction).sum())

    worst = 0.0
    targets = [(x.ravel(), dx.ravel())]
    targets += [(p.value.ravel(), p.grad.ravel()) for p in lay.params()]
    for values, grads in targets:
        coords = np.arange(values.size)
        if max_coords is not None and values.size > max_coords:
            coords = rng.choice(values.size, size=max_coords, replace=False)
        for i in coords:
            orig = values[i]
            values[i] = orig + step
            above = loss()
            values[i] = orig - step
            below = loss()
            values[i] = orig
            numeric = (above - below) / (2.0 * step)
            analytic = grads[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
