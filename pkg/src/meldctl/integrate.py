"""Classical fixed-step Runge-Kutta."""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np

from .errors import NonFiniteState


def rk4_step(dynamics, x, u, dt: float) -> np.ndarray:
    """One RK4 step of dx/dt = dynamics(x, u) with ``u`` held over the step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(dynamics(x, u), dtype=float)
    if not np.all(np.isfinite(k1)):
        raise NonFiniteState("dynamics not finite at the start of the step")
    k2 = np.asarray(dynamics(x + 0.5 * dt * k1, u), dtype=float)
    k3 = np.asarray(dynamics(x + 0.5 * dt * k2, u), dtype=float)
    k4 = np.asarray(dynamics(x + dt * k3, u), dtype=float)
    x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteState("state became non-finite")
    return x_next


def rk4_flow(field, t, x, dt):
    """One RK4 step of the time-varying field dx/dt = field(t, x); traceable.

    The four stages run as a rolled loop so that ``field`` is traced and
    compiled once rather than four times.
    """
    offsets = jnp.array([0.0, 0.5, 0.5, 1.0])
    weights = jnp.array([1.0, 2.0, 2.0, 1.0]) / 6.0
    x = jnp.asarray(x)

    def stage(carry, coeffs):
        k_prev, acc = carry
        c, w = coeffs
        k = field(t + c * dt, x + (c * dt) * k_prev)
        return (k, acc + w * k), None

    zero = jnp.zeros_like(x)
    (_, acc), _ = jax.lax.scan(stage, (zero, zero), (offsets, weights))
    return x + dt * acc
