"""Square output choices, meld certification and validity tests."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from math import comb
from typing import Sequence

import jax
import numpy as np

from .errors import DimensionMismatch, SizeOverflow, UndefinedRelativeDegree
from .lie import (
    ControlAffineSystem,
    degrees_hold,
    interaction_rows,
    relative_degree,
)
from .maps import deck_evaluator

COND_MAX = 1e12
MAX_DECK = 31
MAX_CHOICES = 10**6


@dataclass(frozen=True)
class Choice:
    """A selection of deck outputs, stored both as bits and as sorted indices (0-based)."""

    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("choice bits must be 0 or 1")
        if not 1 <= len(bits) <= MAX_DECK:
            raise SizeOverflow(f"deck size must be between 1 and {MAX_DECK}")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_indices(cls, q: int, indices: Sequence[int]) -> "Choice":
        bits = [0] * q
        for i in indices:
            if not 0 <= i < q:
                raise IndexError(f"output index {i} outside deck of size {q}")
            bits[i] = 1
        return cls(tuple(bits))

    @classmethod
    def parse(cls, text: str) -> "Choice":
        """Parse a bit string such as ``"0011100"`` (whitespace ignored)."""
        cleaned = "".join(text.split())
        if not cleaned or set(cleaned) - {"0", "1"}:
            raise ValueError(f"not a bit string: {text!r}")
        return cls(tuple(int(c) for c in cleaned))

    @property
    def q(self) -> int:
        return len(self.bits)

    @property
    def indices(self) -> tuple:
        return tuple(i for i, b in enumerate(self.bits) if b)

    @property
    def size(self) -> int:
        return sum(self.bits)

    @property
    def bitstring(self) -> str:
        return "".join(str(b) for b in self.bits)

    def __str__(self):
        return self.bitstring


def square_choices(q: int, p: int) -> list:
    """Every choice of ``p`` outputs out of ``q``, in lexicographic index order."""
    if not 1 <= p < q:
        raise ValueError(f"need 1 <= p < q, got p={p}, q={q}")
    if q > MAX_DECK:
        raise SizeOverflow(f"deck size {q} exceeds {MAX_DECK}")
    if comb(q, p) > MAX_CHOICES:
        raise SizeOverflow(f"C({q},{p}) = {comb(q, p)} choices exceeds {MAX_CHOICES}")
    return [Choice.from_indices(q, idx) for idx in itertools.combinations(range(q), p)]


def selection_matrix(choice: Choice, q: int | None = None) -> np.ndarray:
    """The p x q matrix of canonical rows picking the selected outputs."""
    q = choice.q if q is None else q
    if q != choice.q:
        raise DimensionMismatch(f"choice has {choice.q} bits, deck has {q} outputs")
    gamma = np.zeros((choice.size, q))
    gamma[np.arange(choice.size), choice.indices] = 1.0
    return gamma


@dataclass
class MeldCertificate:
    sigma: Choice
    x0: np.ndarray
    r_sigma: tuple
    degree_sum: int
    det_A: float
    cond_A: float
    is_meld: bool
    reject_reason: str = ""


def _classify(sys, choice, x0, degrees, amat_full, cond_max):
    idx = choice.indices
    r_sigma = tuple(degrees[i] for i in idx)
    if any(r is None for r in r_sigma):
        names = [sys.output_names[i] for i in idx if degrees[i] is None]
        raise UndefinedRelativeDegree(f"relative degree undefined at x0 for {names}")
    degree_sum = int(sum(r_sigma))
    amat = amat_full[list(idx)]
    det = float(np.linalg.det(amat))
    cond = float(np.linalg.cond(amat)) if np.all(np.isfinite(amat)) else float("inf")
    if not np.isfinite(cond):
        cond = float("inf")
    reason = ""
    if degree_sum != sys.n:
        reason = "degree-sum"
    elif det == 0.0 or cond >= cond_max:
        reason = "singular-A"
    return MeldCertificate(choice, np.array(x0, dtype=float), r_sigma, degree_sum, det, cond, not reason, reason)


def _square_check(sys, choice):
    if choice.q != sys.q:
        raise DimensionMismatch(f"choice has {choice.q} bits, deck has {sys.q} outputs")
    if choice.size != sys.m:
        raise DimensionMismatch(f"a square choice selects {sys.m} outputs, got {choice.size}")


def certify_meld(sys: ControlAffineSystem, choice: Choice, x0, cond_max: float = COND_MAX) -> MeldCertificate:
    """Degree-sum and interaction-rank test of one square choice at ``x0``."""
    _square_check(sys, choice)
    degrees = [None] * sys.q
    for i in choice.indices:
        degrees[i] = relative_degree(sys, i, x0).r
    if any(degrees[i] is None for i in choice.indices):
        names = [sys.output_names[i] for i in choice.indices if degrees[i] is None]
        raise UndefinedRelativeDegree(f"relative degree undefined at x0 for {names}")
    rows = np.full((sys.q, sys.m), np.nan)
    selected = {i: degrees[i] for i in choice.indices}
    rows[list(choice.indices)] = interaction_rows(sys, choice.indices, x0, selected)
    return _classify(sys, choice, x0, degrees, rows, cond_max)


@dataclass
class MeldReport:
    """Outcome of an exhaustive sweep; ``melds`` and ``rejected`` partition the choices."""

    x0: np.ndarray
    degrees: tuple
    certificates: list

    @property
    def melds(self) -> list:
        return [c for c in self.certificates if c.is_meld]

    @property
    def rejected(self) -> list:
        return [c for c in self.certificates if not c.is_meld]

    def find(self, choice: Choice) -> MeldCertificate:
        for cert in self.certificates:
            if cert.sigma == choice:
                return cert
        raise KeyError(choice.bitstring)


def enumerate_melds(sys: ControlAffineSystem, x0, cond_max: float = COND_MAX) -> MeldReport:
    """Certify every square choice of the deck at ``x0``.

    Relative degrees and the full interaction matrix are evaluated once;
    each choice is then a row selection plus a small dense factorization.
    """
    x0 = np.asarray(x0, dtype=float)
    degrees = tuple(relative_degree(sys, i, x0).r for i in range(sys.q))
    defined = {i: r for i, r in enumerate(degrees) if r is not None}
    amat_full = np.full((sys.q, sys.m), np.nan)
    if defined:
        idx = tuple(sorted(defined))
        amat_full[list(idx)] = interaction_rows(sys, idx, x0, defined)
    certs = []
    for choice in square_choices(sys.q, sys.m):
        if any(degrees[i] is None for i in choice.indices):
            certs.append(MeldCertificate(choice, x0.copy(), (), 0, float("nan"), float("inf"), False, "undefined-degree"))
            continue
        certs.append(_classify(sys, choice, x0, degrees, amat_full, cond_max))
    return MeldReport(x0, degrees, certs)


def meld_report_csv(report: MeldReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sigma_bits", "degree_sum", "det_A", "cond_A", "is_meld", "reject_reason"])
    for c in report.certificates:
        writer.writerow([c.sigma.bitstring, c.degree_sum, f"{c.det_A:.17g}", f"{c.cond_A:.17g}", int(c.is_meld), c.reject_reason])
    return buf.getvalue()


class ValidityTester:
    """Pointwise membership in the validity set of one certified meld.

    A state belongs when the meld's interaction matrix has condition number
    below ``cond_max`` and every deck output keeps the relative degree it had
    at the certificate point. Batched states are evaluated in one call.
    """

    def __init__(self, sys: ControlAffineSystem, cert: MeldCertificate, deck_degrees: Sequence[int], cond_max: float = COND_MAX):
        if not cert.is_meld:
            raise ValueError(f"choice {cert.sigma} is not a certified meld")
        self.sys = sys
        self.cert = cert
        self.degrees = tuple(int(r) for r in deck_degrees)
        self.cond_max = cond_max
        self.evaluator = _shared_evaluator(sys, self.degrees)
        self._rows = list(cert.sigma.indices)

    def interaction(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return np.asarray(self.evaluator.traced_jit(x)[2])[self._rows]
        return np.asarray(self.evaluator.batched(x)[2])[:, self._rows]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        amat = self.interaction(x)
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(amat)
        cond = np.where(np.isfinite(cond), cond, np.inf)
        same_degrees = np.all(degrees_hold(self.sys, self.degrees, x), axis=-1)
        ok = (cond < self.cond_max) & same_degrees
        return bool(ok) if x.ndim == 1 else ok


def _shared_evaluator(sys, degrees):
    ev = deck_evaluator(sys, degrees)
    if not hasattr(ev, "batched"):
        ev.traced_jit = jax.jit(ev.traced)
        ev.batched = jax.jit(jax.vmap(ev.traced))
    return ev


def validity_membership(sys: ControlAffineSystem, choice: Choice, x, x0, cond_max: float = COND_MAX):
    """True when ``x`` (or each row of a batch) lies in the validity set certified at ``x0``."""
    cert = certify_meld(sys, choice, x0, cond_max)
    if not cert.is_meld:
        raise ValueError(f"choice {choice} is not a meld at the certificate point ({cert.reject_reason})")
    x0 = np.asarray(x0, dtype=float)
    deck_degrees = tuple(relative_degree(sys, i, x0).r for i in range(sys.q))
    if any(r is None for r in deck_degrees):
        raise UndefinedRelativeDegree("deck relative degrees undefined at the certificate point")
    return ValidityTester(sys, cert, deck_degrees, cond_max)(x)


def compatible_at(sys: ControlAffineSystem, choice_a: Choice, choice_b: Choice, x, x0_a, x0_b=None, cond_max: float = COND_MAX) -> bool:
    """Pointwise stand-in for compatibility: both melds valid at ``x``."""
    x0_b = x0_a if x0_b is None else x0_b
    return bool(validity_membership(sys, choice_a, x, x0_a, cond_max)) and bool(
        validity_membership(sys, choice_b, x, x0_b, cond_max)
    )
