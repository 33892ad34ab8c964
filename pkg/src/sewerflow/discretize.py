"""Adams-Moulton coefficients, stencil residuals, and delayed-index arithmetic.

The trajectory optimizer discretizes every continuous balance as an implicit
linear multistep update

    x(n) - x(n-1) = delta * sum_k alpha_k * D(n - k),   k = 0..steps

with alpha_0 multiplying the current-period derivative. The family is named so
that order 1 is the trapezoidal scheme; labels 2..4 coincide with the classical
accuracy order (steps = max(order, 2) - 1).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_ORDER = 4


@dataclass(frozen=True)
class AMScheme:
    """Implicit multistep scheme: coefficients alpha[0..steps], alpha[0] implicit."""

    order: int
    alpha: tuple[float, ...] = field(repr=True)

    @property
    def steps(self) -> int:
        return len(self.alpha) - 1

    def __post_init__(self) -> None:
        if abs(sum(self.alpha) - 1.0) > 1e-12:
            raise ValueError("inconsistent scheme: coefficients must sum to 1")


def _solve_order_conditions(steps: int) -> np.ndarray:
    # Exactness on t^p, p = 1..steps+1, with nodes t_k = -k:
    #   sum_k alpha_k (-k)^(p-1) = (-1)^(p+1) / p
    rows = np.array([[(-k) ** (p - 1) for k in range(steps + 1)]
                     for p in range(1, steps + 2)], dtype=float)
    rhs = np.array([(-1.0) ** (p + 1) / p for p in range(1, steps + 2)])
    return np.linalg.solve(rows, rhs)


def am_coefficients(order: int) -> AMScheme:
    """Return the Adams-Moulton scheme for the given order label (1..4).

    Order 1 is the trapezoidal rule [1/2, 1/2]; order 3 is [5/12, 8/12, -1/12];
    order 4 is [3/8, 19/24, -5/24, 1/24]. Order 2 coincides with the trapezoid
    (the two-point scheme already integrates linears and quadratics exactly).
    """
    if not isinstance(order, (int, np.integer)) or isinstance(order, bool):
        raise ValueError(f"order must be an integer, got {order!r}")
    if order < 1 or order > MAX_ORDER:
        raise ValueError(f"unsupported Adams-Moulton order {order}; supported range is 1..{MAX_ORDER}")
    steps = max(order, 2) - 1
    alpha = _solve_order_conditions(steps)
    return AMScheme(order=int(order), alpha=tuple(alpha.tolist()))


def stencil_residual(scheme: AMScheme, states, derivs, delta: float) -> float:
    """Residual of the multistep update at the newest point of the sequences.

    states[n] - states[n-1] - delta * sum_k alpha_k derivs[n-k], with n the last
    index. Zero iff the discrete dynamics hold there.
    """
    states = np.asarray(states, dtype=float)
    derivs = np.asarray(derivs, dtype=float)
    k = scheme.steps
    if states.shape[0] < 2 or derivs.shape[0] < k + 1:
        raise ValueError(
            f"insufficient history: need 2 states and {k + 1} derivatives, "
            f"got {states.shape[0]} and {derivs.shape[0]}")
    acc = 0.0
    for j, a in enumerate(scheme.alpha):
        acc += a * derivs[-1 - j]
    return float(states[-1] - states[-2] - delta * acc)


def delayed_index(n: int, pipe, tau_ic: int) -> int:
    """Period index seen through a pipe's transport delay: n - delay_steps.

    Raises when the delayed index precedes the available initial-condition
    history (indices below -tau_ic).
    """
    d = int(getattr(pipe, "delay_steps", pipe if isinstance(pipe, (int, np.integer)) else 0))
    idx = n - d
    if idx < -tau_ic:
        raise IndexError(
            f"delayed index {idx} precedes initial-condition history (-{tau_ic})")
    return idx
