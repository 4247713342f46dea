"""Closed-loop simulation of the switching controller and its trace."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .control import GainProfile, compiled_law
from .errors import DimensionMismatch, NonFiniteState, SingularInteraction
from .integrate import rk4_flow
from .lie import degrees_hold
from .maps import COND_MAX, _padded_chunks, deck_evaluator, reference_states
from .schedule import SwitchSchedule

CHUNK = 1024
HOLDS = ("stage", "zoh")


@dataclass
class SimTrace:
    """Row j holds the state at t_j and the control computed there."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    meld_index: np.ndarray
    melds: list
    jets: np.ndarray
    ref_jets: np.ndarray
    errors: np.ndarray
    virtual: np.ndarray
    cond: np.ndarray
    degrees: tuple
    output_names: tuple
    dt: float
    schedule: SwitchSchedule
    chi: np.ndarray = None
    bound_S: float = float("nan")
    compatible: list = field(default_factory=list)

    @property
    def error_norms(self) -> np.ndarray:
        return np.linalg.norm(self.errors, axis=2)

    @property
    def chi_error(self) -> np.ndarray:
        if self.chi is None:
            return np.full(len(self.times), np.nan)
        return np.linalg.norm(self.chi - self.states, axis=1)

    @property
    def interval_starts(self) -> np.ndarray:
        return self.schedule.step_indices(self.dt)

    def interval_rows(self, k: int) -> slice:
        starts = self.interval_starts
        stop = starts[k + 1] if k + 1 < len(starts) else len(self.times)
        return slice(int(starts[k]), int(min(stop, len(self.times))))

    def meld_ids(self) -> list:
        return [self.melds[k].bitstring for k in self.meld_index]

    def csv_header(self) -> list:
        n, m, q = self.states.shape[1], self.inputs.shape[1], len(self.degrees)
        cols = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)] + ["meld_id"]
        cols += [f"y{i + 1}" for i in range(q)] + [f"yd{i + 1}" for i in range(q)] + [f"err{i + 1}" for i in range(q)]
        return cols + ["chi_err", "bound_S"]

    def csv_text(self) -> str:
        q = len(self.degrees)
        ids = self.meld_ids()
        numeric_head = np.column_stack([self.times, self.states, self.inputs])
        numeric_tail = np.column_stack(
            [self.jets[:, :, 0], self.ref_jets[:, :q, 0], self.error_norms, self.chi_error, np.full(len(self.times), self.bound_S)]
        )
        lines = [",".join(self.csv_header())]
        for j in range(len(self.times)):
            head = ",".join(_fmt(v) for v in numeric_head[j])
            tail = ",".join(_fmt(v) for v in numeric_tail[j])
            lines.append(f"{head},{ids[j]},{tail}")
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.17g}"


_RUNNERS: dict = {}


def _runner(sys, degrees, gains: GainProfile, refs, hold: str):
    key = (id(sys), tuple(degrees), tuple(tuple(r) for r in gains.rows), refs.jets_fn, hold)
    entry = _RUNNERS.get(key)
    if entry is not None and entry[0] is sys:
        return entry[1]
    law = compiled_law(sys, degrees, gains)
    ref_fn = refs.jets_fn

    def controlled(params, t, x, selected):
        return law(x, ref_fn(params, t), selected)

    def run(x, params, times, selected, dt):
        def step(x, inputs):
            t, sel = inputs
            u, w, jets, xi, cond = controlled(params, t, x, sel)
            ref = ref_fn(params, t)
            if hold == "stage":

                def field(s, z):
                    return sys.vector_field(z, controlled(params, s, z, sel)[0])

            else:

                def field(s, z):
                    return sys.vector_field(z, u)

            x_next = rk4_flow(field, t, x, dt)
            return x_next, (x, u, w, jets, ref, xi, cond)

        return jax.lax.scan(step, x, (times, selected))

    compiled = jax.jit(run)
    _RUNNERS[key] = (sys, compiled)
    return compiled


def run_scenario(
    model,
    degrees,
    gains: GainProfile,
    refs,
    schedule: SwitchSchedule,
    x0,
    dt: float = 1e-3,
    t_end: float | None = None,
    hold: str = "stage",
    cond_max: float = COND_MAX,
    bound_S: float = float("nan"),
    chi: bool = True,
    check_switches: bool = True,
) -> SimTrace:
    """Simulate the switching controller on the time grid t0 + j dt, j = 0..N.

    ``hold="stage"`` re-evaluates the control law at every Runge-Kutta stage;
    ``hold="zoh"`` keeps the value computed at the grid point for the whole
    step. Switching instants are snapped down to the grid.
    """
    sys = getattr(model, "system", model)
    degrees = tuple(int(r) for r in degrees)
    if hold not in HOLDS:
        raise ValueError(f"hold must be one of {HOLDS}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if len(gains.rows) != sys.q or gains.degrees != degrees:
        raise DimensionMismatch("gain rows must match the deck relative degrees")
    for c in schedule.melds:
        if c.q != sys.q or c.size != sys.m:
            raise DimensionMismatch(f"meld {c} is not a square choice of this deck")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.n,):
        raise DimensionMismatch(f"initial state must have shape ({sys.n},)")
    t0 = schedule.t0
    t_end = float(schedule.instants[-1]) if t_end is None else float(t_end)
    n_steps = int(np.floor((t_end - t0) / dt + 1e-9))
    times = t0 + dt * np.arange(n_steps + 1)
    starts = schedule.step_indices(dt)
    meld_index = np.searchsorted(starts, np.arange(n_steps + 1), side="right") - 1
    selected = np.array([schedule.melds[k].indices for k in meld_index], dtype=int)

    runner = _runner(sys, degrees, gains, refs, hold)
    params = tuple(jnp.asarray(p) for p in refs.params)
    x = jnp.asarray(x0)
    pieces = []
    for used, (tc, sc) in _padded_chunks((times, selected), CHUNK):
        x_last, out = runner(x, params, tc, sc, dt)
        out = [np.asarray(o)[:used] for o in out]
        pieces.append(out)
        x = out[0][-1] if used < CHUNK else x_last
        if not np.all(np.isfinite(np.asarray(x))) and used == CHUNK:
            break
    states, inputs, virtual, jets, ref, xi, cond = (np.concatenate(parts) for parts in zip(*pieces))
    rows = len(states)
    times, meld_index = times[:rows], meld_index[:rows]

    bad_state = ~np.all(np.isfinite(states), axis=1)
    bad_cond = ~(cond < cond_max)
    if bad_state.any() or bad_cond.any():
        first_state = np.argmax(bad_state) if bad_state.any() else rows
        first_cond = np.argmax(bad_cond) if bad_cond.any() else rows
        if first_cond <= first_state:
            t_bad = float(times[first_cond])
            raise SingularInteraction(
                f"interaction matrix of meld {schedule.melds[meld_index[first_cond]]} singular at t = {t_bad:.6g}",
                float(cond[first_cond]),
                t_bad,
            )
        t_bad = float(times[first_state])
        raise NonFiniteState(f"state became non-finite at t = {t_bad:.6g}", t_bad)
    if rows < len(selected):
        raise NonFiniteState("simulation stopped early", float(times[-1]))

    trace = SimTrace(
        times=times,
        states=states,
        inputs=inputs,
        meld_index=meld_index,
        melds=list(schedule.melds),
        jets=jets,
        ref_jets=ref,
        errors=xi,
        virtual=virtual,
        cond=cond,
        degrees=degrees,
        output_names=tuple(sys.output_names),
        dt=dt,
        schedule=schedule,
        bound_S=bound_S,
    )
    if check_switches:
        trace.compatible = _switch_checks(sys, degrees, trace, cond_max)
    if chi:
        trace.chi = chi_trace(sys, degrees, trace, cond_max)
    return trace


def _switch_checks(sys, degrees, trace: SimTrace, cond_max: float) -> list:
    """Pointwise joint validity of the outgoing and incoming melds at each switch state."""
    ev = deck_evaluator(sys, degrees)
    starts = trace.interval_starts
    results = []
    for k in range(1, len(starts)):
        j = int(starts[k])
        if j >= len(trace.times):
            break
        x = trace.states[j]
        _, _, amat = ev(x)
        ok = bool(np.all(degrees_hold(sys, degrees, x)))
        for c in (trace.melds[k - 1], trace.melds[k]):
            ok &= bool(np.linalg.cond(amat[list(c.indices)]) < cond_max)
        if not ok:
            warnings.warn(
                f"melds {trace.melds[k - 1]} and {trace.melds[k]} are not jointly valid at the switch t = {trace.times[j]:.6g}",
                RuntimeWarning,
                stacklevel=3,
            )
        results.append(ok)
    return results


def chi_trace(sys, degrees, trace: SimTrace, cond_max: float = COND_MAX) -> np.ndarray:
    """chi(t): the state whose active-meld jets equal the desired ones (NaN where Newton fails)."""
    ev = deck_evaluator(sys, degrees)
    flat_by_meld = [ev.flat_index(c) for c in trace.melds]
    flats = np.array([flat_by_meld[k] for k in trace.meld_index])
    desired = (trace.ref_jets[:, :, : ev.r_max] * (np.arange(ev.r_max)[None, :] < np.asarray(degrees)[:, None]))
    targets = np.take_along_axis(desired.reshape(len(trace.times), -1), flats, axis=1)
    chi, _ = reference_states(sys, degrees, flats, targets, trace.states[0], trace.states, cond_max)
    return chi


def fitted_decay_rate(times, values, tail: float = 0.6) -> float:
    """Least-squares slope of -log(values) over the final ``tail`` fraction of the samples."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    start = int(np.floor(len(times) * (1.0 - tail)))
    t, v = times[start:], values[start:]
    keep = v > 0
    if keep.sum() < 2:
        return float("nan")
    slope = np.polyfit(t[keep], np.log(v[keep]), 1)[0]
    return float(-slope)
