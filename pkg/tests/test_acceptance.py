"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
repeated in the terminal summary of any pytest run that includes this file.
"""

import subprocess
import sys
import textwrap
import time

import jax
import numpy as np
import pytest
from scipy.linalg import expm

import oracles
from conftest import HOME
from meldctl.control import AssumptionConstants, companion_matrix, dwell_times, meld_constants
from meldctl.integrate import rk4_step
from meldctl.lie import lie_f, lie_g_lie_f
from meldctl.melds import Choice, certify_meld, validity_membership
from meldctl.models import coriolis_matrix, kinetic_energy, manipulator_dynamics, mass_matrix_gradient
from meldctl.pipeline import simulate
from meldctl.scenario import fitted_decay_rate, run_scenario
from meldctl.schedule import SwitchSchedule, shared_outputs

RESULTS = {}

SCENARIO_MELDS = ("1110000", "0011100", "0100011", "0010011", "1000011")
JOINTS = Choice.parse("1110000")


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    return ok


@pytest.fixture(scope="module")
def joint_run(pick_place):
    """Ten seconds on the joint meld alone, starting off the reference."""
    scn = pick_place
    x0 = scn.x0 + np.array([0.08, -0.05, 0.06, 0.0, 0.0, 0.0])
    sched = SwitchSchedule([0.0], [JOINTS])
    return run_scenario(scn.model, scn.degrees, scn.gains, scn.refs, sched, x0, dt=1e-3, t_end=10.0, chi=False)


def test_criterion_01_lie_engine_matches_finite_differences(arm):
    rng = np.random.default_rng(2024)
    xs = rng.uniform(arm.box_lo, arm.box_hi, size=(100, 6))
    sys = arm.system
    worst = 0.0
    for k in range(3):
        ad = np.array([[lie_f(sys, i, k, x) for i in range(7)] for x in xs])
        fd = oracles.lie_drift_fd(xs, k, h=3e-3)
        worst = max(worst, _relative(ad, fd))
        for j in range(3):
            ad = np.array([[lie_g_lie_f(sys, i, j, k, x) for i in range(7)] for x in xs])
            fd = oracles.lie_mixed_fd(xs, j, k, h=3e-3)
            worst = max(worst, _relative(ad, fd))
    assert record(1, worst < 1e-6, f"worst relative error {worst:.2e} over 100 states, 7 outputs, orders 0-2 (< 1e-6)")


def _relative(ad, fd):
    # scale: the entry itself, the batch RMS of that derivative, floored at 1e-6 task units
    scale = np.maximum(np.maximum(np.abs(fd), np.sqrt(np.mean(fd**2, axis=0))), 1e-6)
    return float(np.max(np.abs(ad - fd) / scale))


SWEEP = textwrap.dedent(
    """
    import time, numpy as np
    from meldctl.models import build_model
    from meldctl.melds import enumerate_melds
    sys_ = build_model("manipulator-3r").system
    x = np.array([0.0, np.pi / 4, 0.0, 0.0, 0.0, 0.0])
    t = time.perf_counter(); enumerate_melds(sys_, x); cold = time.perf_counter() - t
    t = time.perf_counter(); enumerate_melds(sys_, x); warm = time.perf_counter() - t
    print(cold, warm)
    """
)


def test_criterion_02_meld_enumeration(arm):
    from meldctl.melds import enumerate_melds

    report = enumerate_melds(arm.system, HOME)
    melds = {c.sigma.bitstring for c in report.melds}
    missing = [b for b in SCENARIO_MELDS if b not in melds]
    rng = np.random.default_rng(7)
    pts = np.column_stack([rng.uniform(-np.pi, np.pi, (1000, 3)), rng.uniform(-1.0, 1.0, (1000, 3))])
    joint_global = bool(np.all(validity_membership(arm.system, JOINTS, pts, HOME)))
    out = subprocess.run([sys.executable, "-c", SWEEP], capture_output=True, text=True, check=True)
    cold, warm = (float(v) for v in out.stdout.split())
    ok = len(report.certificates) == 35 and not missing and joint_global and cold < 1.0
    detail = (
        f"35 choices classified, {len(report.melds)} melds; missing {missing or 'none'}; "
        f"joint meld valid at 1000 configurations: {joint_global}; sweep {cold:.2f} s cold, {warm * 1e3:.0f} ms warm"
    )
    if missing:
        cert = report.find(Choice.parse(missing[0]))
        detail += f"; {missing[0]} rejected ({cert.reject_reason}, det {cert.det_A:.1e}, the last joint is straight here)"
    assert record(2, ok, detail)


def test_scenario_melds_away_from_the_straight_last_joint(arm):
    # the one scenario meld rejected at home is certified at its own item configuration
    x_item = np.array([0.9, 0.4, 1.1, 0.0, 0.0, 0.0])
    assert certify_meld(arm.system, Choice.parse("1000011"), x_item).is_meld


def test_criterion_03_exact_linearization(joint_run):
    trace = joint_run
    dt = trace.dt
    worst = 0.0
    for i in JOINTS.indices:
        acc = oracles.finite_second_derivative(trace.jets[:, i, 0], dt)
        worst = max(worst, float(np.max(np.abs(acc - trace.virtual[1:-1, i]))))
    assert record(3, worst < 1e-3, f"max |second difference - w| = {worst:.2e} at dt = {dt:g} (< 1e-3)")


def test_criterion_04_exponential_decay(joint_run, pick_place):
    trace = joint_run
    eig = np.sort(np.linalg.eigvals(companion_matrix([15.0, 15.0])).real)
    expected = np.sort([(-15 - np.sqrt(165)) / 2, (-15 + np.sqrt(165)) / 2])
    alpha = meld_constants(JOINTS, pick_place.gains).alpha_sigma
    rates = [fitted_decay_rate(trace.times, trace.error_norms[:, i]) for i in JOINTS.indices]
    ratios = np.array(rates) / alpha
    ok = np.allclose(eig, expected, rtol=1e-12) and abs(alpha - 1.066) < 1e-3 and np.all((ratios >= 0.95) & (ratios <= 1.6))
    assert record(4, ok, f"alpha {alpha:.4f}; fitted rates / alpha = {', '.join(f'{r:.3f}' for r in ratios)} (in [0.95, 1.6])")


def test_criterion_05_shared_outputs_seamless(pick_place_trace):
    trace = pick_place_trace
    sched = trace.schedule
    step = expm(companion_matrix([15.0, 15.0]) * trace.dt)
    worst, blocks = 0.0, 0
    for k in range(sched.n_intervals - 1):
        shared = shared_outputs(sched, k, 1)
        start = trace.interval_rows(k).start
        stop = trace.interval_rows(k + 1).stop
        for i in shared:
            xi = trace.errors[start:stop, i, :]
            pred = np.empty_like(xi)
            pred[0] = xi[0]
            for j in range(1, len(xi)):
                pred[j] = step @ pred[j - 1]
            worst = max(worst, float(np.max(np.linalg.norm(pred - xi, axis=1))))
            blocks += 1
    ok = blocks > 0 and worst < 1e-5
    assert record(5, ok, f"{blocks} shared-output blocks, max deviation from the unswitched chain {worst:.2e} (< 1e-5)")


def test_criterion_06_tube_after_dwell(certified_run):
    scn, cert, sched, trace = certified_run
    dwell = sched.dwell_bounds(cert.tau0, cert.tau_bar)
    gaps = np.diff(sched.instants)
    margins = []
    for k in range(sched.n_intervals):
        rows = trace.interval_rows(k)
        bound_k = cert.tau0 if k == 0 else cert.tau_bar
        late = trace.times[rows] >= sched.instants[k] + bound_k - 1e-12
        if np.any(late):
            margins.append(float(np.min(cert.epsilon + cert.N + 1e-6 - trace.error_norms[rows][late])))
    dwell_ok = bool(np.all(gaps >= dwell - 1e-12))
    ok = dwell_ok and len(margins) == sched.n_intervals and min(margins) >= 0
    detail = (
        f"tau0 {cert.tau0:.3f}, tau_bar {cert.tau_bar:.3f}, eps {cert.epsilon:g}, N {cert.N:.1e}; "
        f"worst margin {min(margins):.2e} over {len(margins)} intervals"
    )
    assert record(6, ok, detail)


def test_criterion_07_ultimate_state_bound(certified_run):
    scn, cert, sched, trace = certified_run
    expected_s = cert.p**2 * cert.L_Psi * cert.L_Theta * cert.C * (cert.epsilon + cert.N) + cert.p * cert.N
    late = trace.times >= sched.t0 + cert.tau0
    dist = trace.chi_error[late]
    finite = np.isfinite(dist)
    gap_share = 1.0 - float(np.mean(finite))
    worst = float(np.max(dist[finite]))
    ok = abs(cert.S - expected_s) <= 1e-9 * expected_s and gap_share < 1e-3 and worst <= cert.S
    assert record(7, ok, f"max |chi - x| = {worst:.3e} <= S = {cert.S:.4g}; inversion gaps {gap_share:.3%} (< 0.1%)")


def test_criterion_08_formula_regression():
    consts = AssumptionConstants(N=0.1, L_Theta=2.0, L_Psi=1.5, sampling_box={})
    cert = dwell_times(consts, alpha=1.0, C=1.0, p=3, epsilon=0.1, initial_error=1.0)
    ok = abs(cert.tau_bar - np.log(12.0)) < 1e-9 and abs(cert.S - 5.7) < 1e-9
    assert record(8, ok, f"tau_bar = {cert.tau_bar:.10f} (ln 12 = {np.log(12.0):.10f}), S = {cert.S:.10f} (5.7)")


def test_criterion_09_pick_place_regression(pick_place, pick_place_trace):
    trace = pick_place_trace
    terminal = []
    for k in range(trace.schedule.n_intervals):
        rows = trace.interval_rows(k)
        terminal.append(max(trace.error_norms[rows.stop - 1, i] for i in trace.melds[k].indices))
    scn = pick_place
    again = simulate(scn, scn.schedule, scn.refs, scn.t_end, scn.config.dt)
    identical = again.csv_text() == trace.csv_text()
    ok = max(terminal) < 1e-2 and identical
    detail = f"terminal in-meld errors {', '.join(f'{e:.1e}' for e in terminal)} (< 1e-2); repeated trace byte-identical: {identical}"
    assert record(9, ok, detail)


def test_criterion_10_mechanics_sanity(arm):
    params = arm.params
    rng = np.random.default_rng(10)
    skew = 0.0
    for _ in range(100):
        q, qd = rng.uniform(-np.pi, np.pi, 3), rng.uniform(-1.0, 1.0, 3)
        mdot = np.asarray(mass_matrix_gradient(params, q)) @ qd
        skew = max(skew, abs(float(qd @ (mdot - 2.0 * np.asarray(coriolis_matrix(params, q, qd))) @ qd)))

    accel = jax.jit(lambda x, u: manipulator_dynamics(params, x[:3], x[3:], u))

    def dynamics(x, u):
        return np.concatenate([x[3:], np.asarray(accel(x, u))])

    x = np.array([0.4, -0.8, 1.2, 0.9, -0.6, 0.7])
    e0 = float(kinetic_energy(params, x[:3], x[3:]))
    seconds, dt = 2.0, 1e-3
    for _ in range(int(seconds / dt)):
        x = rk4_step(dynamics, x, np.zeros(3), dt)
    drift = abs(float(kinetic_energy(params, x[:3], x[3:])) - e0) / seconds
    ok = drift < 1e-6 and skew < 1e-10
    assert record(10, ok, f"energy drift {drift:.1e} per second (< 1e-6); max |qd'(dM/dt - 2C)qd| = {skew:.1e} (< 1e-10)")


if __name__ == "__main__":
    start = time.perf_counter()
    code = pytest.main([__file__, "-q", "-s"])
    print(f"acceptance suite finished in {time.perf_counter() - start:.1f} s")
    sys.exit(code)
