"""Central finite-difference validation of :func:`gradient`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .graph import DomainError, Node, constant, gradient, variable


@dataclass
class GradCheckResult:
    """Outcome of a finite-difference comparison.

    ``error`` is ``max_i |analytic_i - numeric_i| / max(|analytic|_inf,
    |numeric|_inf)``: every coordinate is measured against the scale of the
    whole gradient so that near-zero coordinates do not amplify rounding
    noise. Two all-zero gradients give an error of 0.
    """

    error: float
    index: int | None
    analytic: np.ndarray
    numeric: np.ndarray

    def __float__(self) -> float:
        return self.error


def finite_difference_check(f: Callable[[Node], Node], point, eps: float = 1e-5) -> GradCheckResult:
    """Compare ``gradient(f)`` at ``point`` with central differences.

    ``f`` maps a flat parameter node to a scalar node. It may itself call
    :func:`gradient`, which is how second-order derivatives are validated.
    """
    point = np.asarray(point, dtype=np.float64).reshape(-1)
    x = variable(point)
    out = f(x)
    (g,) = gradient(out, [x])
    analytic = np.array(g.value, dtype=np.float64).reshape(-1)

    numeric = np.empty_like(point)
    for i in range(point.size):
        hi, lo = point.copy(), point.copy()
        hi[i] += eps
        lo[i] -= eps
        try:
            f_hi = _scalar(f(variable(hi)))
            f_lo = _scalar(f(variable(lo)))
        except DomainError:
            f_hi = f_lo = np.nan
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            numeric[i] = np.nan
            return GradCheckResult(np.inf, i, analytic, numeric)
        numeric[i] = (f_hi - f_lo) / (2.0 * eps)

    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return GradCheckResult(0.0, None, analytic, numeric)
    rel = np.abs(analytic - numeric) / scale
    worst = int(np.argmax(rel))
    return GradCheckResult(float(rel[worst]), worst, analytic, numeric)


def second_order_check(f: Callable[[Node], Node], point, direction=None, eps: float = 1e-5) -> GradCheckResult:
    """Finite-difference check of the Hessian-vector product of ``f``.

    Checks ``x -> <grad f(x), v>`` so the gradient of a gradient is validated
    against differences of first-order gradients.
    """
    point = np.asarray(point, dtype=np.float64).reshape(-1)
    if direction is None:
        direction = np.linspace(-1.0, 1.0, point.size) + 0.1
    v = constant(np.asarray(direction, dtype=np.float64).reshape(-1))

    def directional(x: Node) -> Node:
        (g,) = gradient(f(x), [x])
        return (g.reshape(-1) * v).sum()

    return finite_difference_check(directional, point, eps)


def _scalar(node: Node) -> float:
    return float(np.asarray(node.value).reshape(-1)[0])
