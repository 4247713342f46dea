"""Scenario assembly shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ScenarioConfig
from .control import (
    DwellCertificate,
    dwell_times,
    estimate_assumption_constants,
    global_constants,
    meld_constants,
    reference_mismatch,
)
from .errors import EmptyMeldSet, UndefinedRelativeDegree
from .lie import deck_relative_degrees
from .maps import deck_evaluator
from .melds import certify_meld
from .scenario import fitted_decay_rate, run_scenario
from .schedule import SwitchSchedule

MAX_RETIMINGS = 5


@dataclass(eq=False)
class Scenario:
    config: ScenarioConfig
    model: object
    degrees: tuple
    gains: object
    refs: object
    schedule: SwitchSchedule
    t_end: float

    @property
    def system(self):
        return self.model.system

    @property
    def x0(self) -> np.ndarray:
        return np.asarray(self.config.x0, dtype=float)


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    model = cfg.build_model()
    sys = model.system
    if cfg.x0.shape != (sys.n,):
        raise ConfigError(f"x0 must have {sys.n} entries")
    if cfg.p != sys.m:
        raise ConfigError(f"p = {cfg.p} but the model has {sys.m} inputs (melds are square)")
    x_op = cfg.x0 if cfg.operating_point is None else cfg.operating_point
    if np.shape(x_op) != (sys.n,):
        raise ConfigError(f"operating_point must have {sys.n} entries")
    degrees = deck_relative_degrees(sys, x_op)
    if any(r is None for r in degrees):
        missing = [n for n, r in zip(sys.output_names, degrees) if r is None]
        raise UndefinedRelativeDegree(f"relative degree undefined at the operating point for {missing}")
    gains = cfg.gains(degrees)
    refs = cfg.references(model, degrees)
    return Scenario(cfg, model, degrees, gains, refs, cfg.schedule(), cfg.end_time())


def initial_error(scn: Scenario, schedule: SwitchSchedule, refs) -> float:
    """Sum over the first meld's outputs of the jet error norm at t0."""
    ev = deck_evaluator(scn.system, scn.degrees)
    jets = np.asarray(ev.jets_traced(scn.x0))
    desired = refs.jets(schedule.t0)
    total = 0.0
    for i in schedule.melds[0].indices:
        r = scn.degrees[i]
        total += float(np.linalg.norm(desired[i, :r] - jets[i, :r]))
    return total


def retime(scn: Scenario, schedule: SwitchSchedule):
    """Move reference segments and the end time along with stretched intervals."""
    old = scn.schedule.instants
    shift = schedule.instants - old
    starts = scn.refs.path.starts
    k = np.clip(np.searchsorted(old, starts, side="right") - 1, 0, len(old) - 1)
    refs = scn.refs.retimed(starts + shift[k])
    tail = max(scn.t_end - old[-1], schedule.dwell[-1] if schedule.dwell is not None and len(schedule.dwell) else 0.0)
    return refs, float(schedule.instants[-1] + tail)


def _grid(schedule: SwitchSchedule, t_end: float, step: float) -> np.ndarray:
    return np.arange(schedule.t0, t_end, step)


def certify_scenario(scn: Scenario, epsilon: float | None = None, seed: int | None = None, dt: float | None = None):
    """Estimate the constants and dwell bounds of a scenario.

    Returns (certificate, schedule, refs, t_end). In auto-certified mode the
    schedule is stretched to the dwell bounds and the references move with
    it; N is re-evaluated on the stretched timeline until the bounds settle.
    """
    cfg = scn.config
    sys = scn.system
    epsilon = cfg.epsilon if epsilon is None else epsilon
    seed = cfg.seed if seed is None else seed
    dt = cfg.dt if dt is None else dt
    schedule, refs, t_end = scn.schedule, scn.refs, scn.t_end
    melds = list(dict.fromkeys(schedule.melds))
    if not melds:
        raise EmptyMeldSet("schedule has no melds")
    for k, choice in enumerate(schedule.melds):
        cert = certify_meld(sys, choice, refs.state(schedule.instants[k]))
        if not cert.is_meld:
            raise UndefinedRelativeDegree(f"{choice} is not a meld at the reference state of interval {k} ({cert.reject_reason})")
    alpha, C = global_constants([meld_constants(c, scn.gains) for c in melds])
    boxes = cfg.sampling_boxes(sys.n)
    if not boxes:
        boxes = {"default": (scn.model.box_lo, scn.model.box_hi)}
    consts = estimate_assumption_constants(
        sys, scn.degrees, melds, refs, boxes, cfg.samples, seed, schedule=schedule, times=_grid(schedule, t_end, cfg.n_step)
    )
    e0 = initial_error(scn, schedule, refs)
    cert = dwell_times(consts, alpha, C, sys.m, epsilon, e0)
    if cfg.mode == "auto-certified":
        for _ in range(MAX_RETIMINGS):
            schedule = scn.schedule.certify(cert.tau0, cert.tau_bar, grid=dt)
            refs, t_end = retime(scn, schedule)
            per_step = [(schedule.meld_at(t),) for t in _grid(schedule, t_end, cfg.n_step)]
            consts.N = reference_mismatch(sys, scn.degrees, refs, per_step, _grid(schedule, t_end, cfg.n_step))
            updated = dwell_times(consts, alpha, C, sys.m, epsilon, initial_error(scn, schedule, refs))
            settled = updated.tau0 <= cert.tau0 and updated.tau_bar <= cert.tau_bar
            cert = DwellCertificate(**{**updated.__dict__, "tau0": max(cert.tau0, updated.tau0), "tau_bar": max(cert.tau_bar, updated.tau_bar)})
            cert.T = cert.tau0
            if settled:
                break
        schedule = scn.schedule.certify(cert.tau0, cert.tau_bar, grid=dt)
        refs, t_end = retime(scn, schedule)
    else:
        schedule = schedule.mark(cert.tau0, cert.tau_bar)
    cert.extra = certificate_extras(scn, schedule, consts)
    return cert, schedule, refs, t_end


def certificate_extras(scn: Scenario, schedule: SwitchSchedule, consts=None) -> dict:
    extra = {
        "degrees": ",".join(str(r) for r in scn.degrees),
        "gains": ";".join(",".join(repr(float(v)) for v in row) for row in scn.gains.rows),
        "fixture": scn.config.fingerprint(),
        "instants": ",".join(repr(float(t)) for t in schedule.instants),
        "melds": ",".join(c.bitstring for c in schedule.melds),
        "seed": str(scn.config.seed),
    }
    if consts is not None:
        extra["per_meld"] = "; ".join(f"{k}: L_Theta {v[0]:.6g}, L_Psi {v[1]:.6g}" for k, v in consts.per_meld.items())
        extra["inversion_failures"] = f"{consts.failures} of {consts.samples}"
    return extra


def apply_certificate(scn: Scenario, cert: DwellCertificate, dt: float):
    """Schedule, references and end time a certificate implies for this scenario."""
    if scn.config.mode == "auto-certified":
        schedule = scn.schedule.certify(cert.tau0, cert.tau_bar, grid=dt)
        refs, t_end = retime(scn, schedule)
        return schedule, refs, t_end
    return scn.schedule.mark(cert.tau0, cert.tau_bar), scn.refs, scn.t_end


def simulate(scn: Scenario, schedule, refs, t_end, dt, bound_S=float("nan")):
    return run_scenario(
        scn.model, scn.degrees, scn.gains, refs, schedule, scn.x0, dt=dt, t_end=t_end, hold=scn.config.hold, bound_S=bound_S
    )


def summary_text(trace, cert: DwellCertificate | None = None) -> str:
    """Per-interval decay rates (tail fit) and error maxima of a simulated trace."""
    lines = []
    names = trace.output_names
    status = "certified" if trace.schedule.certified else "uncertified"
    lines.append(f"schedule = {status}, {trace.schedule.n_intervals} intervals, dt = {trace.dt:g}, rows = {len(trace.times)}")
    norms = trace.error_norms
    for k in range(trace.schedule.n_intervals):
        rows = trace.interval_rows(k)
        if rows.start >= rows.stop:
            continue
        meld = trace.melds[k]
        t = trace.times[rows]
        lines.append(f"interval {k}: [{t[0]:.6g}, {t[-1] + trace.dt:.6g}) meld {meld.bitstring}")
        for i in meld.indices:
            rate = fitted_decay_rate(t, norms[rows, i])
            lines.append(
                f"  {names[i]}: max error {np.max(norms[rows, i]):.4e}, terminal {norms[rows.stop - 1, i]:.4e}, fitted rate {rate:.4f}"
            )
        off = [i for i in range(len(names)) if i not in meld.indices]
        if off:
            lines.append(f"  off-meld max error {np.max(norms[rows][:, off]):.4e}")
    chi = trace.chi_error
    if np.any(np.isfinite(chi)):
        lines.append(f"max state-to-reference-state distance = {np.nanmax(chi):.4e} ({int(np.sum(~np.isfinite(chi)))} inversion gaps)")
    lines.append(f"max interaction condition number = {np.max(trace.cond):.4g}")
    if trace.compatible:
        lines.append("switch compatibility = " + ", ".join("ok" if c else "VIOLATED" for c in trace.compatible))
    if cert is not None:
        lines.append(f"bound_S = {cert.S:.6g}, tau0 = {cert.tau0:.6g}, tau_bar = {cert.tau_bar:.6g}")
    return "\n".join(lines) + "\n"
