"""Switching feedback-linearizing controller and its certificate constants."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np
from scipy.linalg import expm
from scipy.stats import qmc

from .errors import (
    DimensionMismatch,
    EmptyMeldSet,
    InversionFailure,
    NonpositiveEpsilon,
    NotHurwitz,
    SingularInteraction,
)
from .lie import ControlAffineSystem, drift_vector, interaction_matrix
from .maps import COND_MAX, deck_evaluator, reference_states

ALPHA_MARGIN = 0.01
DEFECT_GAP = 1e-6


def is_hurwitz(k_row) -> bool:
    """True when s^r + k[r-1] s^(r-1) + ... + k[0] has all roots in Re < 0."""
    k = np.asarray(k_row, dtype=float).reshape(-1)
    if k.size == 0:
        raise ValueError("gain row must be non-empty")
    if not np.all(np.isfinite(k)) or np.any(k <= 0):
        return False
    # Routh table: root locations on the imaginary axis come out exactly, unlike np.roots
    coeffs = np.concatenate([[1.0], k[::-1]])
    upper, lower = coeffs[0::2].copy(), coeffs[1::2].copy()
    while lower.size:
        if not lower[0] > 0:
            return False
        padded = np.append(lower, np.zeros(upper.size - lower.size))
        upper, lower = lower, upper[1:] - upper[0] / lower[0] * padded[1:]
    return True


def companion_matrix(k_row) -> np.ndarray:
    """Error-chain matrix: shift structure on top, -k as the last row."""
    k = np.asarray(k_row, dtype=float).reshape(-1)
    r = k.size
    a = np.zeros((r, r))
    a[:-1, 1:] = np.eye(r - 1)
    a[-1] = -k
    return a


@dataclass(frozen=True)
class GainProfile:
    """One gain row [k^0, ..., k^(r_i - 1)] per deck output."""

    rows: tuple

    def __post_init__(self):
        rows = tuple(np.asarray(r, dtype=float).reshape(-1) for r in self.rows)
        for i, r in enumerate(rows):
            if np.any(r <= 0):
                raise NotHurwitz(f"gain row {i} must be strictly positive, got {r}")
            if not is_hurwitz(r):
                raise NotHurwitz(f"gain row {i} = {r} is not Hurwitz")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def uniform(cls, degrees: Sequence[int], row) -> "GainProfile":
        row = np.asarray(row, dtype=float)
        if any(int(r) != row.size for r in degrees):
            raise DimensionMismatch("uniform gain row length must equal every relative degree")
        return cls(tuple(row.copy() for _ in degrees))

    @property
    def degrees(self) -> tuple:
        return tuple(r.size for r in self.rows)

    def padded(self, r_max: int) -> np.ndarray:
        """(q, r_max) array with zero padding beyond each output's degree."""
        out = np.zeros((len(self.rows), r_max))
        for i, r in enumerate(self.rows):
            out[i, : r.size] = r
        return out


def error_state(ref_jets, out_jets) -> list:
    """Per-output tracking errors (desired minus actual jets)."""
    if len(ref_jets) != len(out_jets):
        raise DimensionMismatch("reference and output jets list different outputs")
    errors = []
    for i, (d, y) in enumerate(zip(ref_jets, out_jets)):
        d = np.asarray(d, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        if d.shape != y.shape:
            raise DimensionMismatch(f"output {i}: reference jet {d.shape} vs output jet {y.shape}")
        errors.append(d - y)
    return errors


def virtual_input(ref_top, errors, gains: GainProfile) -> np.ndarray:
    """w_i = y_i^{d,(r_i)} + k_i . xi_i for every deck output."""
    ref_top = np.asarray(ref_top, dtype=float).reshape(-1)
    if len(errors) != len(gains.rows) or ref_top.size != len(gains.rows):
        raise DimensionMismatch("one error jet and one top reference derivative per gain row")
    w = np.empty(len(gains.rows))
    for i, (xi, k) in enumerate(zip(errors, gains.rows)):
        xi = np.asarray(xi, dtype=float).reshape(-1)
        if xi.size != k.size:
            raise DimensionMismatch(f"output {i}: error jet has {xi.size} entries, gain row has {k.size}")
        w[i] = ref_top[i] + k @ xi
    return w


def control_law(sys: ControlAffineSystem, choice, x, w, degrees=None, cond_max: float = COND_MAX) -> np.ndarray:
    """u = A_sigma(x)^-1 (w_sigma - b_sigma(x)) for the selected outputs.

    ``w`` is the full deck virtual input; only the selected entries are used.
    """
    idx = tuple(getattr(choice, "indices", choice))
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != sys.q:
        raise DimensionMismatch(f"virtual input must have {sys.q} entries")
    amat = interaction_matrix(sys, idx, x, degrees)
    b = drift_vector(sys, idx, x, degrees)
    cond = np.linalg.cond(amat)
    if not np.isfinite(cond) or cond >= cond_max:
        raise SingularInteraction(f"interaction matrix of {choice} is singular (cond {cond:.3g})", cond)
    return np.linalg.solve(amat, w[list(idx)] - b)


@dataclass(frozen=True)
class MeldConstants:
    C_sigma: float
    alpha_sigma: float


def block_constants(k_row, margin: float = ALPHA_MARGIN) -> MeldConstants:
    """Envelope constants of one error chain: ||exp(A t)|| <= C exp(-alpha t)."""
    if not is_hurwitz(k_row):
        raise NotHurwitz(f"gain row {np.asarray(k_row)} is not Hurwitz")
    a = companion_matrix(k_row)
    eig, vecs = np.linalg.eig(a)
    alpha = (1.0 - margin) * float(-np.max(eig.real))
    if a.shape[0] == 1:
        return MeldConstants(1.0, alpha)
    gaps = np.abs(eig[:, None] - eig[None, :])[~np.eye(len(eig), dtype=bool)]
    if np.min(gaps) >= DEFECT_GAP:
        return MeldConstants(max(1.0, float(np.linalg.cond(vecs / np.linalg.norm(vecs, axis=0)))), alpha)
    # (near-)defective block: sampled supremum of the weighted propagator norm
    times = np.linspace(0.0, 20.0 / alpha, 2001)
    env = [np.linalg.norm(expm(a * t), 2) * np.exp(alpha * t) for t in times]
    return MeldConstants(max(1.0, float(np.max(env))), alpha)


def meld_constants(choice, gains: GainProfile, margin: float = ALPHA_MARGIN) -> MeldConstants:
    """Worst envelope constants over the error chains of the selected outputs."""
    idx = tuple(getattr(choice, "indices", choice))
    blocks = [block_constants(gains.rows[i], margin) for i in idx]
    return MeldConstants(max(b.C_sigma for b in blocks), min(b.alpha_sigma for b in blocks))


def global_constants(constants: Sequence[MeldConstants]) -> tuple:
    """(alpha, C): the slowest rate and the largest overshoot over all melds."""
    constants = list(constants)
    if not constants:
        raise EmptyMeldSet("no melds to take constants over")
    return min(c.alpha_sigma for c in constants), max(c.C_sigma for c in constants)


@dataclass
class AssumptionConstants:
    N: float
    L_Theta: float
    L_Psi: float
    sampling_box: dict
    per_meld: dict = field(default_factory=dict)
    failures: int = 0
    samples: int = 0


def latin_hypercube(lo, hi, n_samples: int, seed: int) -> np.ndarray:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    unit = qmc.LatinHypercube(d=lo.size, seed=np.random.default_rng(seed)).random(n_samples)
    return qmc.scale(unit, lo, hi) if np.all(hi > lo) else lo + unit * (hi - lo)


def spectral_norms(mats) -> np.ndarray:
    mats = np.asarray(mats, dtype=float)
    return np.linalg.svd(mats, compute_uv=False)[..., 0]


def lipschitz_estimate(jacobian, lo, hi, n_samples: int = 10_000, seed: int = 42) -> float:
    """Largest sampled spectral norm of a batched Jacobian over a box."""
    pts = latin_hypercube(lo, hi, n_samples, seed)
    return float(np.max(spectral_norms(jacobian(pts))))


def _jet_jacobians(ev):
    if not hasattr(ev, "batched_jet_jacobian"):
        ev.batched_jet_jacobian = jax.jit(jax.vmap(jax.jacfwd(lambda x: ev.jets_traced(x).reshape(-1))))
    return ev.batched_jet_jacobian


def _batched_jets(ev):
    if not hasattr(ev, "batched_jets"):
        ev.batched_jets = jax.jit(jax.vmap(ev.jets_traced))
    return ev.batched_jets


def lipschitz_constants(sys, degrees, choice, lo, hi, n_samples=10_000, seed=42, cond_max=COND_MAX, chunk=2500):
    """Sampled Lipschitz bounds (L_Theta, L_Psi) of one meld over a state box.

    The Jacobian of the inverse map is the inverse of the jet-map Jacobian;
    the Jacobian of each composite map is the output's jet Jacobian times it.
    Samples with condition number at or above ``cond_max`` are counted as
    failures and left out of the maxima.
    """
    ev = deck_evaluator(sys, degrees)
    jac_fn = _jet_jacobians(ev)
    flat = ev.flat_index(choice)
    rows = [ev.flat_index((i,)) for i in range(sys.q)]
    pts = latin_hypercube(lo, hi, n_samples, seed)
    l_theta, l_psi, failures = 0.0, 0.0, 0
    for start in range(0, n_samples, chunk):
        full = np.asarray(jac_fn(pts[start : start + chunk]))
        jphi = full[:, flat, :]
        svals = np.linalg.svd(jphi, compute_uv=False)
        good = np.all(np.isfinite(full), axis=(1, 2)) & (svals[:, -1] * cond_max > svals[:, 0])
        failures += int(np.sum(~good))
        if not np.any(good):
            continue
        jpsi = np.linalg.inv(jphi[good])
        l_psi = max(l_psi, float(np.max(1.0 / svals[good, -1])))
        for r in rows:
            l_theta = max(l_theta, float(np.max(spectral_norms(full[good][:, r, :] @ jpsi))))
    return l_theta, l_psi, failures


def reference_mismatch(sys, degrees, refs, melds_per_step, times, cond_max=COND_MAX):
    """max_t max_i || ybar_i^d(t) - Theta_{i,sigma(t)}(ybar_sigma^d(t)) ||.

    ``melds_per_step[t]`` lists the melds to test at ``times[t]``; each is
    inverted along the time grid by warm-started Newton.
    """
    ev = deck_evaluator(sys, degrees)
    ref = refs.jets_on(times)
    mask = np.arange(ev.r_max)[None, :] < np.asarray(degrees)[:, None]
    desired = ref[:, :, : ev.r_max] * mask
    worst = 0.0
    for choice in sorted({c for cs in melds_per_step for c in cs}, key=lambda c: c.bitstring):
        sel = np.array([choice in cs for cs in melds_per_step])
        flat = ev.flat_index(choice)
        targets = desired.reshape(len(times), -1)[sel][:, flat]
        flats = np.broadcast_to(flat, targets.shape)
        # the bundle's own desired states seed each Newton chain and its restarts
        guess = refs.states_on(times[sel])
        xs, ok = reference_states(sys, degrees, flats, targets, guess[0], guess, cond_max)
        if not np.all(ok):
            bad = times[sel][~ok][0]
            raise InversionFailure(f"reference jets of meld {choice} not invertible at t = {bad:.6g}")
        jets = np.asarray(_batched_jets(ev)(xs)) * mask
        gap = np.linalg.norm(desired[sel] - jets, axis=2)
        worst = max(worst, float(np.max(gap)))
    return worst


def estimate_assumption_constants(
    sys: ControlAffineSystem,
    degrees,
    melds,
    refs,
    sampling_box,
    n_samples: int = 10_000,
    seed: int = 42,
    schedule=None,
    times=None,
    cond_max: float = COND_MAX,
    max_failure_rate: float = 0.01,
) -> AssumptionConstants:
    """Sampled N, L_Theta and L_Psi over the given melds.

    ``sampling_box`` is either a (lo, hi) pair used for every meld or a dict
    from meld bit string to its own (lo, hi). N is evaluated on ``times``
    against the meld active at each time when a schedule is given, else
    against every meld.
    """
    melds = list(melds)
    if not melds:
        raise EmptyMeldSet("no melds to estimate constants for")
    boxes = {}
    for choice in melds:
        if isinstance(sampling_box, dict):
            lo, hi = sampling_box.get(choice.bitstring, sampling_box.get("default"))
        else:
            lo, hi = sampling_box
        boxes[choice.bitstring] = (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    per_meld, failures = {}, 0
    for choice in melds:
        lo, hi = boxes[choice.bitstring]
        lt, lp, nf = lipschitz_constants(sys, degrees, choice, lo, hi, n_samples, seed, cond_max)
        if nf > max_failure_rate * n_samples:
            raise InversionFailure(f"meld {choice}: {nf} of {n_samples} samples are singular inside its box")
        per_meld[choice.bitstring] = (lt, lp)
        failures += nf
    n_bound = 0.0
    if refs is not None and times is not None:
        times = np.asarray(times, dtype=float)
        if schedule is not None:
            per_step = [(schedule.meld_at(t),) for t in times]
        else:
            per_step = [tuple(melds)] * len(times)
        n_bound = reference_mismatch(sys, degrees, refs, per_step, times, cond_max)
    return AssumptionConstants(
        N=n_bound,
        L_Theta=max(v[0] for v in per_meld.values()),
        L_Psi=max(v[1] for v in per_meld.values()),
        sampling_box=boxes,
        per_meld=per_meld,
        failures=failures,
        samples=n_samples * len(melds),
    )


@dataclass
class DwellCertificate:
    epsilon: float
    alpha: float
    C: float
    L_Theta: float
    L_Psi: float
    N: float
    p: int
    tau0: float
    tau_bar: float
    S: float
    T: float
    box: str = ""
    extra: dict = field(default_factory=dict)


def _clamped_log_rate(argument: float, alpha: float) -> float:
    return max(0.0, float(np.log(argument)) / alpha) if argument > 1.0 else 0.0


def dwell_times(consts: AssumptionConstants, alpha: float, C: float, p: int, epsilon: float, initial_error: float) -> DwellCertificate:
    """First and recurring dwell bounds plus the ultimate state bound.

    tau0 = ln(L_Theta C e0 / eps) / alpha, tau_bar = ln(L_Theta C p (eps + N) / eps) / alpha,
    both clamped at zero; S = p^2 L_Psi L_Theta C (eps + N) + p N and T = tau0.
    """
    if not epsilon > 0:
        raise NonpositiveEpsilon(f"epsilon must be positive, got {epsilon}")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    lt, lp, n = consts.L_Theta, consts.L_Psi, consts.N
    tau0 = _clamped_log_rate(lt * C * initial_error / epsilon, alpha)
    tau_bar = _clamped_log_rate(lt * C * p * (epsilon + n) / epsilon, alpha)
    s_bound = p * p * lp * lt * C * (epsilon + n) + p * n
    box = "; ".join(f"{k}: [{', '.join(f'{v:g}' for v in lo)}] .. [{', '.join(f'{v:g}' for v in hi)}]" for k, (lo, hi) in consts.sampling_box.items())
    return DwellCertificate(epsilon, alpha, C, lt, lp, n, p, tau0, tau_bar, s_bound, tau0, box)


CERT_FIELDS = ("epsilon", "alpha", "C", "L_Theta", "L_Psi", "N", "p", "tau0", "tau_bar", "S", "T")


def certificate_text(cert: DwellCertificate) -> str:
    lines = [f"{name} = {_fmt(getattr(cert, name))}" for name in CERT_FIELDS]
    lines.append(f"box = {cert.box}")
    for key in sorted(cert.extra):
        lines.append(f"{key} = {cert.extra[key]}")
    return "\n".join(lines) + "\n"


def certificate_csv(cert: DwellCertificate) -> str:
    buf = io.StringIO()
    buf.write(",".join(CERT_FIELDS + ("box",)) + "\n")
    buf.write(",".join([_fmt(getattr(cert, k)) for k in CERT_FIELDS] + ['"' + cert.box.replace('"', "'") + '"']) + "\n")
    return buf.getvalue()


def parse_certificate(text: str) -> DwellCertificate:
    values = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed certificate line: {line!r}")
        values[key.strip()] = value.strip()
    missing = [k for k in CERT_FIELDS if k not in values]
    if missing:
        raise ValueError(f"certificate lacks {missing}")
    nums = {k: float(values.pop(k)) for k in CERT_FIELDS}
    nums["p"] = int(nums["p"])
    box = values.pop("box", "")
    return DwellCertificate(**nums, box=box, extra=values)


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else f"{float(v):.17g}"


def compiled_law(sys: ControlAffineSystem, degrees, gains: GainProfile):
    """Traceable (x, ref_jets, selected indices) -> (u, w, jets, cond) for the simulator.

    ``ref_jets`` is the (q, r_max + 1) reference array; ``selected`` holds the
    p deck indices of the active meld as an integer array so that switching
    melds never triggers recompilation.
    """
    ev = deck_evaluator(sys, degrees)
    r = np.asarray(ev.degrees)
    k = jnp.asarray(gains.padded(ev.r_max))
    mask = jnp.asarray(np.arange(ev.r_max)[None, :] < r[:, None], dtype=float)
    top = jnp.asarray(r)
    rows = jnp.arange(sys.q)

    def law(x, ref_jets, selected):
        jets, b, amat = ev.traced(x)
        xi = (ref_jets[:, : ev.r_max] - jets) * mask
        w = ref_jets[rows, top] + jnp.sum(k * xi, axis=1)
        a_sel = amat[selected]
        u = jnp.linalg.solve(a_sel, w[selected] - b[selected])
        svals = jnp.linalg.svd(a_sel, compute_uv=False)
        return u, w, jets, xi, svals[0] / svals[-1]

    return law
