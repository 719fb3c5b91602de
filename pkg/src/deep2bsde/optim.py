"""Plain SGD and Adam with step-decay learning-rate schedules.

The Adam moment updates are

    x' = beta1 x + (1 - beta1) g        (first moment)
    y' = beta2 y + (1 - beta2) g^2      (second moment)

and the parameter update at step counter m (bias correction uses
t = m + 1, so the first step divides by 1 - beta^1 instead of zero)

    theta' = theta - gamma_m * (x' / (1 - beta1^t)) / (sqrt(y' / (1 - beta2^t)) + eps)

with eps added outside the square root.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

try:  # single fused pass over the parameter vector; numpy fallback below
    import numba

    @numba.njit(cache=True, parallel=True)
    def _adam_fused(x, y, theta, grad, b1, b2, c1, c2, eps, gamma):
        for i in numba.prange(theta.shape[0]):
            g = grad[i]
            xi = b1 * x[i] + (1.0 - b1) * g
            yi = b2 * y[i] + (1.0 - b2) * g * g
            x[i] = xi
            y[i] = yi
            theta[i] -= gamma * (xi / c1) / (np.sqrt(yi / c2) + eps)
except ImportError:  # pragma: no cover
    _adam_fused = None

__all__ = ["Schedule", "AdamConfig", "OptimState", "schedule_eval", "sgd_step", "adam_step"]


@dataclass(frozen=True)
class Schedule:
    """gamma_m = base * factor^floor(m / interval); constant when factor is 1."""

    base: float
    factor: float = 1.0
    interval: int = 1

    def __post_init__(self):
        if self.base <= 0 or self.factor <= 0 or self.interval < 1:
            raise ValueError(f"invalid schedule {self}")

    @classmethod
    def constant(cls, gamma: float) -> "Schedule":
        return cls(base=gamma)

    @classmethod
    def step_decay(cls, base: float, factor: float, interval: int) -> "Schedule":
        return cls(base=base, factor=factor, interval=interval)


def schedule_eval(schedule: Schedule, m: int) -> float:
    if m < 0:
        raise ValueError(f"step counter must be >= 0, got {m}")
    return schedule.base * schedule.factor ** (m // schedule.interval)


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    schedule: Schedule = field(default_factory=lambda: Schedule.constant(1e-2))

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"beta1, beta2 must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class OptimState:
    """Adam memory: first moment x, second moment y, step counter m."""

    x: np.ndarray
    y: np.ndarray
    m: int = 0

    @classmethod
    def zeros(cls, nu: int) -> "OptimState":
        return cls(x=np.zeros(nu), y=np.zeros(nu))


def sgd_step(theta: np.ndarray, grad: np.ndarray, gamma: float) -> np.ndarray:
    if theta.shape != grad.shape:
        raise ValueError(f"shape mismatch {theta.shape} vs {grad.shape}")
    return theta - gamma * grad


def adam_step(state: OptimState, theta: np.ndarray, grad: np.ndarray,
              config: AdamConfig) -> tuple[OptimState, np.ndarray]:
    """One Adam update; returns fresh state and parameters."""
    new = OptimState(x=state.x.copy(), y=state.y.copy(), m=state.m)
    theta = theta.copy()
    adam_step_inplace(new, theta, grad, config)
    return new, theta


def adam_step_inplace(state: OptimState, theta: np.ndarray, grad: np.ndarray,
                      config: AdamConfig, scratch: np.ndarray | None = None) -> None:
    """Hot-path Adam update mutating state and theta in place (no temporaries)."""
    b1, b2 = config.beta1, config.beta2
    t = state.m + 1
    gamma = schedule_eval(config.schedule, state.m)
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    if _adam_fused is not None and theta.shape[0] >= 4096:
        _adam_fused(state.x, state.y, theta, grad, b1, b2, c1, c2, config.epsilon, gamma)
        state.m = t
        return
    upd = scratch if scratch is not None else np.empty_like(theta)
    state.x *= b1
    np.multiply(grad, 1.0 - b1, out=upd)
    state.x += upd
    state.y *= b2
    np.square(grad, out=upd)
    upd *= 1.0 - b2
    state.y += upd
    np.divide(state.y, c2, out=upd)
    np.sqrt(upd, out=upd)
    upd += config.epsilon
    np.divide(state.x, upd, out=upd)
    upd *= gamma / c1
    theta -= upd
    state.m = t
