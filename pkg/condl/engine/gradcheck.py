"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward

LOGGER = logging.getLogger(__name__)

ScalarFunction = Callable[[Tensor], Tensor]


def finite_difference_check(f: ScalarFunction, x: Tensor, h: float = 1e-3) -> float:
    """Return the worst relative gap between analytic and numeric gradients.

    ``f`` is evaluated on a float64 copy of ``x``; the gap for coordinate ``i``
    is ``|analytic_i - numeric_i| / max(1, |analytic_i|)``.
    """

    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")

    point = Tensor(x.data.astype(np.float64).copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        value = f(point)
        if value.size != 1:
            raise ValueError(f"finite_difference_check: f must be scalar-valued, got shape {value.shape}")
        backward(value, tape)
    analytic = (
        np.zeros_like(point.data) if point.grad is None else point.grad.astype(np.float64)
    )

    flat = point.data.reshape(-1)
    worst = 0.0
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + h
        upper = float(np.asarray(f(point).data, dtype=np.float64).sum())
        flat[index] = original - h
        lower = float(np.asarray(f(point).data, dtype=np.float64).sum())
        flat[index] = original
        numeric = (upper - lower) / (2.0 * h)
        exact = float(analytic.reshape(-1)[index])
        worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))

    LOGGER.debug("finite_difference_check", extra={"size": flat.size, "max_error": worst})
    return worst
