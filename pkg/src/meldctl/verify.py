"""Row-by-row checks of a trace CSV against a dwell certificate.

Everything is recomputed from the raw trace columns; nothing the simulator
flagged is trusted. Output errors come from the ``y``/``yd``/``err``
columns: ``err_i`` is the norm of the whole jet error of output i, so for
relative degree two the rate error is recovered as
sign(d/dt e) * sqrt(err^2 - e^2) with e = yd - y.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .control import DwellCertificate, companion_matrix
from .errors import FixtureMismatch

TOLERANCE = 1e-6
SHARED_TOLERANCE = 1e-5
MAX_CHI_GAPS = 1e-3

PASS, FAIL, NA = "PASS", "FAIL", "NOT-APPLICABLE"


@dataclass
class CheckResult:
    name: str
    status: str
    margin: float
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list
    constants: dict
    certified: bool
    intervals: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.status != FAIL for c in self.checks)

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def text(self) -> str:
        lines = [f"verdict = {PASS if self.passed else FAIL}"]
        lines.append(f"schedule = {'certified' if self.certified else 'uncertified schedule'}")
        for c in self.checks:
            lines.append(f"{c.name} = {c.status} (worst margin {c.margin:.6g}) {c.detail}".rstrip())
        for k, (start, meld, gap, need) in enumerate(self.intervals):
            gap_text = "open" if gap is None else f"{gap:.6g}"
            lines.append(f"interval {k}: t = {start:.6g}, meld {meld}, length {gap_text}, dwell bound {need:.6g}")
        for key, value in self.constants.items():
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


@dataclass
class TraceTable:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    meld_ids: list
    outputs: np.ndarray
    desired: np.ndarray
    errors: np.ndarray
    chi_err: np.ndarray
    bound_S: np.ndarray


def read_trace(text: str) -> TraceTable:
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2:
        raise FixtureMismatch("trace has no data rows")
    header = rows[0]
    if "meld_id" not in header or header[0] != "t":
        raise FixtureMismatch("trace header lacks the t and meld_id columns")

    def cols(prefix):
        return [j for j, h in enumerate(header) if h.startswith(prefix) and h[len(prefix) :].isdigit()]

    body = rows[1:]
    if any(len(r) != len(header) for r in body):
        raise FixtureMismatch("trace rows do not match the header width")
    mid = header.index("meld_id")
    data = np.array([[float(v) for j, v in enumerate(r) if j != mid] for r in body])
    numeric = [h for j, h in enumerate(header) if j != mid]

    def block(prefix):
        idx = [numeric.index(header[j]) for j in cols(prefix)]
        return data[:, idx]

    return TraceTable(
        times=data[:, numeric.index("t")],
        states=block("x"),
        inputs=block("u"),
        meld_ids=[r[mid] for r in body],
        outputs=block("y"),
        desired=block("yd"),
        errors=block("err"),
        chi_err=data[:, numeric.index("chi_err")],
        bound_S=data[:, numeric.index("bound_S")],
    )


def certificate_layout(cert: DwellCertificate) -> tuple:
    """(degrees, gain rows) stored alongside the constants."""
    try:
        degrees = tuple(int(v) for v in cert.extra["degrees"].split(","))
        rows = [np.array([float(v) for v in row.split(",")]) for row in cert.extra["gains"].split(";")]
    except (KeyError, ValueError) as exc:
        raise FixtureMismatch("certificate does not record the deck degrees and gains") from exc
    if len(rows) != len(degrees) or any(len(r) != d for r, d in zip(rows, degrees)):
        raise FixtureMismatch("certificate gain rows do not match its degrees")
    return degrees, rows


def _check_fixture(trace: TraceTable, cert: DwellCertificate, degrees):
    q = len(degrees)
    if trace.outputs.shape[1] != q or trace.errors.shape[1] != q or trace.desired.shape[1] != q:
        raise FixtureMismatch(f"trace has {trace.outputs.shape[1]} outputs, certificate deck has {q}")
    for bits in set(trace.meld_ids):
        if len(bits) != q or set(bits) - {"0", "1"} or bits.count("1") != cert.p:
            raise FixtureMismatch(f"meld {bits!r} does not fit a {cert.p}-of-{q} deck")
    s_col = trace.bound_S
    if not np.all(np.isfinite(s_col)) or np.max(np.abs(s_col - cert.S)) > 1e-9 * max(1.0, abs(cert.S)):
        raise FixtureMismatch("trace was not produced under this certificate (bound_S differs)")
    steps = np.diff(trace.times)
    if len(steps) and (np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, trace.times[-1])):
        raise FixtureMismatch("trace times are not a uniform grid")


def interval_starts(meld_ids) -> np.ndarray:
    """Row indices where the active meld changes (row 0 included)."""
    ids = np.asarray(meld_ids)
    return np.concatenate([[0], np.flatnonzero(ids[1:] != ids[:-1]) + 1])


def error_jets(trace: TraceTable, degrees) -> list:
    """Per output, the (rows, r_i) jet error, or None when it cannot be recovered."""
    e = trace.desired - trace.outputs
    dt = trace.times[1] - trace.times[0] if len(trace.times) > 1 else 1.0
    jets = []
    for i, r in enumerate(degrees):
        if r == 1:
            jets.append(e[:, i : i + 1])
        elif r == 2:
            rate = np.sqrt(np.maximum(trace.errors[:, i] ** 2 - e[:, i] ** 2, 0.0))
            sign = np.sign(np.gradient(e[:, i], dt)) if len(e) > 1 else np.ones(len(e))
            jets.append(np.column_stack([e[:, i], sign * rate]))
        else:
            jets.append(None)
    return jets


def _min_margin(values) -> float:
    values = [v for v in values if np.isfinite(v)]
    return float(min(values)) if values else float("nan")


def verify_trace(trace: TraceTable, cert: DwellCertificate) -> VerificationReport:
    degrees, gain_rows = certificate_layout(cert)
    _check_fixture(trace, cert, degrees)
    t = trace.times
    err = trace.errors
    starts = interval_starts(trace.meld_ids)
    ends = np.append(starts[1:], len(t))
    melds = [trace.meld_ids[s] for s in starts]
    selected = [[i for i, b in enumerate(bits) if b == "1"] for bits in melds]
    t0 = t[0]

    dwell = np.full(len(starts), cert.tau_bar)
    dwell[0] = cert.tau0
    gaps = [float(t[starts[k + 1]] - t[starts[k]]) if k + 1 < len(starts) else None for k in range(len(starts))]
    dt = t[1] - t[0] if len(t) > 1 else 0.0
    # instants are snapped to the grid, so a gap may fall short of its bound by under one step
    certified = all(g is None or g >= d - dt - 1e-12 for g, d in zip(gaps, dwell))

    checks = []

    # single-interval envelope for every deck output
    margins = []
    for k, (s, e) in enumerate(zip(starts, ends)):
        base = np.sqrt(np.sum(err[s, selected[k]] ** 2))
        bound = cert.L_Theta * cert.C * np.exp(-cert.alpha * (t[s:e] - t[s])) * base + cert.N + TOLERANCE
        margins.append(float(np.min(bound[:, None] - err[s:e])))
    m = _min_margin(margins)
    checks.append(CheckResult("error_envelope", PASS if m >= 0 else FAIL, m, "per-interval envelope, all outputs"))

    # tube after each dwell bound
    margins = []
    for k, (s, e) in enumerate(zip(starts, ends)):
        rows = slice(s, e)
        late = t[rows] >= t[s] + dwell[k] - 1e-12
        if np.any(late):
            margins.append(float(np.min(cert.epsilon + cert.N + TOLERANCE - err[rows][late])))
    if margins:
        m = _min_margin(margins)
        detail = "" if certified else "uncertified schedule: bound not guaranteed"
        checks.append(CheckResult("settled_tracking", PASS if m >= 0 else FAIL, m, detail))
    else:
        checks.append(CheckResult("settled_tracking", NA, float("nan"), "no interval outlasts its dwell bound"))

    # ultimate state bound
    if t[-1] < t0 + cert.T:
        checks.append(CheckResult("reference_state_bound", NA, float("nan"), f"trace ends before t0 + T = {t0 + cert.T:.6g}"))
    else:
        late = t >= t0 + cert.T
        chi = trace.chi_err[late]
        finite = np.isfinite(chi)
        gap_share = 1.0 - np.mean(finite)
        m = float(cert.S - np.max(chi[finite])) if np.any(finite) else float("nan")
        ok = gap_share < MAX_CHI_GAPS and np.isfinite(m) and m >= 0
        checks.append(CheckResult("reference_state_bound", PASS if ok else FAIL, m, f"reference-state gaps {gap_share:.3%}"))

    # shared outputs across each switch follow their own linear error chain
    jets = error_jets(trace, degrees)
    margins, skipped = [], 0
    for k in range(1, len(starts)):
        s, e = starts[k - 1], ends[k]
        for i in sorted(set(selected[k - 1]) & set(selected[k])):
            if jets[i] is None:
                skipped += 1
                continue
            step = expm(companion_matrix(gain_rows[i]) * dt)
            pred = np.empty((e - s, degrees[i]))
            pred[0] = jets[i][s]
            for j in range(1, e - s):
                pred[j] = step @ pred[j - 1]
            dev = np.max(np.linalg.norm(pred - jets[i][s:e], axis=1))
            margins.append(SHARED_TOLERANCE - float(dev))
    if margins:
        m = _min_margin(margins)
        detail = f"{len(margins)} shared output blocks" + (f", {skipped} skipped (degree > 2)" if skipped else "")
        checks.append(CheckResult("shared_output_continuity", PASS if m >= 0 else FAIL, m, detail))
    else:
        checks.append(CheckResult("shared_output_continuity", NA, float("nan"), "no output stays selected across a switch"))

    constants = {k: getattr(cert, k) for k in ("epsilon", "alpha", "C", "L_Theta", "L_Psi", "N", "p", "tau0", "tau_bar", "S", "T")}
    intervals = [(float(t[s]), melds[k], gaps[k], float(dwell[k])) for k, s in enumerate(starts)]
    return VerificationReport(checks, constants, certified, intervals)
