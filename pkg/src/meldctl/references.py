"""Reference trajectories for the whole deck.

A configuration path moves through waypoints with rest-to-rest septic
segments; the desired state is (q^d, dq^d/dt) and every deck reference is
the corresponding output evaluated along it, so all references agree with one
feasible trajectory. Constant offsets can be added to chosen outputs to make
the bundle deliberately inconsistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DimensionMismatch


def rest_blend(s):
    """35 s^4 - 84 s^5 + 70 s^6 - 20 s^7 on [0, 1]: rate, curvature and jerk vanish at both ends."""
    return s**4 * (35.0 - 84.0 * s + 70.0 * s * s - 20.0 * s**3)


@dataclass(frozen=True, eq=False)
class JointPath:
    """Rest-to-rest septic moves: segment k goes from waypoint k to k + 1.

    Segment k starts at ``starts[k]`` and lasts ``durations[k]``; before the
    first start the path rests at waypoint 0 and between segments it rests at
    the last waypoint reached. Joins are C3 because every segment starts and
    ends at rest with zero acceleration and jerk.
    """

    waypoints: np.ndarray
    starts: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        wp = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        starts = np.asarray(self.starts, dtype=float).reshape(-1)
        durations = np.broadcast_to(np.asarray(self.durations, dtype=float), starts.shape).copy()
        if len(wp) != len(starts) + 1:
            raise DimensionMismatch("need one more waypoint than segment starts")
        if np.any(np.diff(starts) <= 0):
            raise ValueError("segment starts must be strictly increasing")
        if np.any(durations <= 0):
            raise ValueError("segment durations must be positive")
        gaps = np.diff(starts)
        if np.any(durations[:-1] > gaps + 1e-12):
            raise ValueError("a segment must finish before the next one starts")
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "durations", durations)

    @property
    def dim(self) -> int:
        return self.waypoints.shape[1]

    def position(self, t):
        """Traceable configuration at time ``t``."""
        return path_position((self.waypoints, self.starts, self.durations), t)

    @property
    def params(self) -> tuple:
        return (self.waypoints, self.starts, self.durations)

    def retimed(self, starts) -> "JointPath":
        """Same waypoints with new segment starts; durations shrink to fit the gaps."""
        starts = np.asarray(starts, dtype=float)
        gaps = np.append(np.diff(starts), np.inf)
        return JointPath(self.waypoints, starts, np.minimum(self.durations, gaps))


def path_position(params, t):
    """Configuration of a path given as (waypoints, starts, durations) arrays."""
    waypoints, starts, durations = params
    s = jnp.clip((t - starts) / durations, 0.0, 1.0)
    steps = waypoints[1:] - waypoints[:-1]
    return waypoints[0] + rest_blend(s) @ steps


def _time_tower(fn, order):
    # t -> stacked [fn, fn', ..., fn^(order)] along a new leading axis
    def base(t):
        return fn(t)[None]

    tower = base
    for _ in range(order):
        tower = _extend_time(tower)
    return tower


def _extend_time(tower):
    def extended(t):
        primal, tangent = jax.jvp(tower, (t,), (jnp.ones_like(t),))
        return jnp.concatenate([primal[:1], tangent], axis=0)

    return extended


def deck_reference_fn(sys, r_max: int):
    """Traceable (params, t) -> (q, r_max + 1) reference jets of every deck output.

    ``params`` is (waypoints, starts, durations, offsets); the desired state is
    (q^d, dq^d/dt) and column k holds the k-th time derivative of h_i along it.
    """

    def desired_state(path, t):
        q, qd = jax.jvp(lambda s: path_position(path, s), (t,), (jnp.ones_like(t),))
        return jnp.concatenate([q, qd])

    def jets(params, t):
        path, offsets = params[:3], params[3]
        tower = _time_tower(lambda s: sys.deck(desired_state(path, s)), r_max)
        return tower(t).T.at[:, 0].add(offsets)

    return jets, desired_state


@dataclass(eq=False)
class ReferenceBundle:
    """Desired jets of every deck output, up to and including order r_i."""

    model: object
    path: JointPath
    degrees: tuple
    offsets: np.ndarray = field(default=None)

    def __post_init__(self):
        sys = self.model.system
        self.degrees = tuple(int(r) for r in self.degrees)
        if len(self.degrees) != sys.q:
            raise DimensionMismatch("one relative degree per deck output")
        if self.path.dim != self.model.config_dim:
            raise DimensionMismatch(
                f"path has dimension {self.path.dim}, model configuration has {self.model.config_dim}"
            )
        self.offsets = np.zeros(sys.q) if self.offsets is None else np.asarray(self.offsets, dtype=float)
        if self.offsets.shape != (sys.q,):
            raise DimensionMismatch("one offset per deck output")
        self.r_max = max(self.degrees)
        self.jets_fn, self._state_fn = _reference_fns(sys, self.r_max)

    @property
    def params(self) -> tuple:
        return self.path.params + (self.offsets,)

    @property
    def consistent(self) -> bool:
        return not np.any(self.offsets)

    def state_traced(self, t):
        return self._state_fn(self.path.params, jnp.asarray(t, dtype=float))

    def jets_traced(self, t):
        """(q, r_max + 1) array: column k holds the k-th time derivative."""
        return self.jets_fn(self.params, jnp.asarray(t, dtype=float))

    def jets(self, t) -> np.ndarray:
        return self.jets_on(np.array([t]))[0]

    def jets_on(self, times) -> np.ndarray:
        grid = _GRID_FNS[self.jets_fn]
        return np.asarray(grid(self.params, np.asarray(times, dtype=float)))

    def state(self, t) -> np.ndarray:
        return self.states_on(np.array([t]))[0]

    def states_on(self, times) -> np.ndarray:
        grid = _GRID_FNS[self._state_fn]
        return np.asarray(grid(self.path.params, np.asarray(times, dtype=float)))

    def output_jets(self, jets_row, i: int) -> np.ndarray:
        """(y, dy, ..., y^(r_i - 1)) of output ``i`` from one ``jets`` row."""
        return np.asarray(jets_row)[i, : self.degrees[i]]

    def retimed(self, starts) -> "ReferenceBundle":
        return ReferenceBundle(self.model, self.path.retimed(starts), self.degrees, self.offsets)

    def with_offsets(self, offsets) -> "ReferenceBundle":
        return ReferenceBundle(self.model, self.path, self.degrees, offsets)


_FNS: dict = {}
_GRID_FNS: dict = {}


def _reference_fns(sys, r_max):
    key = (id(sys), r_max)
    entry = _FNS.get(key)
    if entry is None or entry[0] is not sys:
        jets, state = deck_reference_fn(sys, r_max)
        for fn in (jets, state):
            _GRID_FNS[fn] = jax.jit(jax.vmap(fn, in_axes=(None, 0)))
        entry = (sys, jets, state)
        _FNS[key] = entry
    return entry[1], entry[2]
