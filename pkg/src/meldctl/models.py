"""Bundled plant models: a planar 3R manipulator and the double integrator.

The manipulator carries a point mass at every link tip plus a rotational
inertia per link, moves in the horizontal plane (no gravity) and has two
grippers: B1 at the tip of link 2 and B2 at the tip of link 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .lie import ControlAffineSystem

MANIPULATOR_OUTPUTS = ("q1", "q2", "q3", "xB1", "yB1", "xB2", "yB2")
DOUBLE_INTEGRATOR_OUTPUTS = ("x1", "x2")


@dataclass(frozen=True)
class ManipulatorParams:
    lengths: tuple = (0.5, 0.4, 0.3)
    masses: tuple = (4.0, 3.0, 2.0)
    inertias: tuple | None = None  # default: slender rods, m l^2 / 12

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.lengths)
        masses = tuple(float(v) for v in self.masses)
        if self.inertias is None:
            inertias = tuple(m * l * l / 12.0 for m, l in zip(masses, lengths))
        else:
            inertias = tuple(float(v) for v in self.inertias)
        if not (len(lengths) == len(masses) == len(inertias) == 3):
            raise ValueError("the 3R arm needs three lengths, masses and inertias")
        if min(lengths + masses + inertias) <= 0:
            raise ValueError("link lengths, masses and inertias must be positive")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "inertias", inertias)


def _angles(q):
    return jnp.cumsum(jnp.asarray(q))


# _SPAN[k, i, a] = 1 when link a lies between joint i and tip k
_SPAN = np.array([[[1.0 if i <= a <= k else 0.0 for a in range(3)] for i in range(3)] for k in range(3)])
_ROTATES = np.tril(np.ones((3, 3)))  # [k, i]: joint i turns link k


def _link_vectors(params, q):
    th = _angles(q)
    l = jnp.asarray(params.lengths)
    return th, l * jnp.cos(th), l * jnp.sin(th)


def link_tips(params: ManipulatorParams, q):
    """Planar positions of the three link tips, shape (3, 2)."""
    _, cx, sy = _link_vectors(params, q)
    return jnp.stack([jnp.cumsum(cx), jnp.cumsum(sy)], axis=1)


def _tip_jacobians(params, q):
    # (3 tips, 2 axes, 3 joints)
    _, cx, sy = _link_vectors(params, q)
    return jnp.stack([-_SPAN @ sy, _SPAN @ cx], axis=1)


def tip_jacobian(params: ManipulatorParams, q, k: int):
    """d(tip k)/dq, shape (2, 3); column i sums links i..k."""
    return _tip_jacobians(params, q)[k]


def mass_matrix(params: ManipulatorParams, q):
    """Point masses at the link tips plus a rotational inertia per link."""
    jac = _tip_jacobians(params, q)
    masses = jnp.asarray(params.masses)
    inertias = jnp.asarray(params.inertias)
    translational = jnp.einsum("k,kai,kaj->ij", masses, jac, jac)
    rotational = (_ROTATES.T * inertias) @ _ROTATES
    return translational + rotational


def mass_matrix_gradient(params: ManipulatorParams, q):
    """dM[i, j, s] = d M_ij / d q_s."""
    return jax.jacfwd(lambda z: mass_matrix(params, z))(jnp.asarray(q, dtype=float))


def coriolis_matrix(params: ManipulatorParams, q, qd):
    """Christoffel-symbol Coriolis matrix; dM/dt - 2C is skew-symmetric."""
    dm = mass_matrix_gradient(params, q)
    qd = jnp.asarray(qd)
    christoffel = 0.5 * (dm + jnp.transpose(dm, (0, 2, 1)) - jnp.transpose(dm, (2, 1, 0)))
    return christoffel @ qd


def solve3(mat, rhs):
    """Closed-form solve of a 3x3 system by cofactors (cheap to trace and lift)."""
    a, b, c = mat[0], mat[1], mat[2]
    cof = jnp.stack([jnp.cross(b, c), jnp.cross(c, a), jnp.cross(a, b)], axis=1)
    return cof @ rhs / jnp.dot(a, cof[:, 0])


def bias_forces(params: ManipulatorParams, q, qd):
    """C(q, qd) qd written through the centripetal accelerations of the tips."""
    th, cx, sy = _link_vectors(params, q)
    rate = jnp.cumsum(jnp.asarray(qd))
    # tip k acceleration at zero joint acceleration: -sum_{a<=k} l_a rate_a^2 (cos, sin)
    accel = -jnp.stack([jnp.cumsum(cx * rate**2), jnp.cumsum(sy * rate**2)], axis=1)
    jac = _tip_jacobians(params, q)
    return jnp.einsum("k,kai,ka->i", jnp.asarray(params.masses), jac, accel)


def manipulator_dynamics(params: ManipulatorParams, q, qd, tau):
    """Joint accelerations M(q)^-1 (tau - C(q, qd) qd); gravity is absent."""
    rhs = jnp.asarray(tau) - bias_forces(params, q, qd)
    return solve3(mass_matrix(params, q), rhs)


def kinetic_energy(params: ManipulatorParams, q, qd):
    qd = jnp.asarray(qd)
    return 0.5 * qd @ mass_matrix(params, q) @ qd


def forward_outputs(params: ManipulatorParams, q, qd) -> np.ndarray:
    """Deck outputs and their rates, shape (7, 2): columns (y, dy/dt)."""
    q = jnp.asarray(q)
    qd = jnp.asarray(qd)
    tips = link_tips(params, q)
    values = jnp.concatenate([q, tips[1], tips[2]])
    rates = jnp.concatenate([qd, tip_jacobian(params, q, 1) @ qd, tip_jacobian(params, q, 2) @ qd])
    return np.asarray(jnp.stack([values, rates], axis=1))


@dataclass(frozen=True, eq=False)
class Model:
    """A control-affine system whose state is (configuration, velocity)."""

    name: str
    system: ControlAffineSystem
    config_dim: int
    params: object = None
    box_lo: np.ndarray = field(default=None)
    box_hi: np.ndarray = field(default=None)


def manipulator_system(params: ManipulatorParams | None = None, outputs=MANIPULATOR_OUTPUTS) -> Model:
    params = params or ManipulatorParams()

    def f(x):
        q, qd = x[:3], x[3:]
        return jnp.concatenate([qd, manipulator_dynamics(params, q, qd, jnp.zeros(3))])

    def input_field(j):
        def gj(x):
            e = jnp.zeros(3).at[j].set(1.0)
            return jnp.concatenate([jnp.zeros(3), solve3(mass_matrix(params, x[:3]), e)])

        return gj

    def coordinate(name):
        if name in ("q1", "q2", "q3"):
            k = int(name[1]) - 1
            return lambda x: x[k]
        tip = 1 if name.endswith("B1") else 2
        axis = 0 if name.startswith("x") else 1
        return lambda x: link_tips(params, x[:3])[tip, axis]

    unknown = [o for o in outputs if o not in MANIPULATOR_OUTPUTS]
    if unknown:
        raise ValueError(f"unknown manipulator outputs {unknown}")
    system = ControlAffineSystem(
        n=6,
        m=3,
        f=f,
        g=[input_field(j) for j in range(3)],
        deck_h=[coordinate(o) for o in outputs],
        output_names=tuple(outputs),
    )
    lo = np.array([-np.pi, -np.pi, -np.pi, -1.0, -1.0, -1.0])
    return Model("manipulator-3r", system, 3, params, lo, -lo)


def double_integrator_system(outputs=DOUBLE_INTEGRATOR_OUTPUTS) -> Model:
    unknown = [o for o in outputs if o not in DOUBLE_INTEGRATOR_OUTPUTS]
    if unknown:
        raise ValueError(f"unknown double-integrator outputs {unknown}")
    picks = {"x1": lambda x: x[0], "x2": lambda x: x[1]}
    system = ControlAffineSystem(
        n=2,
        m=1,
        f=lambda x: jnp.stack([x[1], jnp.zeros_like(x[1])]),
        g=[lambda x: jnp.array([0.0, 1.0])],
        deck_h=[picks[o] for o in outputs],
        output_names=tuple(outputs),
    )
    return Model("double-integrator", system, 1, None, np.array([-2.0, -2.0]), np.array([2.0, 2.0]))


def build_model(name: str, **kwargs) -> Model:
    if name == "manipulator-3r":
        return manipulator_system(**kwargs)
    if name == "double-integrator":
        return double_integrator_system(**kwargs)
    raise ValueError(f"unknown model {name!r}")
