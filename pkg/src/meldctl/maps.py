"""Jet coordinates of a meld and their Newton inverse.

``phi`` stacks (y_i, dy_i, ..., y_i^(r_i - 1)) over the selected outputs,
``psi`` inverts it by damped Newton, and ``theta`` maps a meld's jets to the
jets of any deck output through the reconstructed state.
"""

from __future__ import annotations

from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DimensionMismatch, InversionFailure, UndefinedRelativeDegree
from .lie import ControlAffineSystem, DeckEvaluator

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 30
COND_MAX = 1e12

_CACHE: dict = {}


def deck_evaluator(sys: ControlAffineSystem, degrees: Sequence[int]) -> DeckEvaluator:
    """Compiled deck evaluator shared per (system, degree pattern)."""
    degrees = tuple(int(r) for r in degrees)
    key = (id(sys), degrees)
    entry = _CACHE.get(key)
    if entry is None or entry[0] is not sys:
        ev = DeckEvaluator(sys, degrees)
        jets = ev.jets_traced
        # the meld enters as a traced index array, so all melds share one compile
        ev.meld_phi = jax.jit(lambda flat, x: jets(x).reshape(-1)[flat])
        ev.meld_jac = jax.jit(jax.jacfwd(lambda x, flat: jets(x).reshape(-1)[flat]))
        ev.meld_solve = jax.jit(
            lambda flat, target, guess, cond_max: newton_solve(jets, flat, target, guess, cond_max=cond_max)
        )
        entry = (sys, ev)
        _CACHE[key] = entry
    return entry[1]


def newton_solve(jets_fn, flat_idx, target, guess, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER, cond_max=COND_MAX):
    """Traceable damped Newton for ``jets_fn(x).reshape(-1)[flat_idx] = target``.

    Returns ``(x, residual_norm, iterations, ok)``. Every iteration tries the
    step lengths 1, 1/2, ..., 2^-(MAX_HALVINGS-1) at once and keeps the longest
    one that lowers the residual norm.
    """
    flat_idx = jnp.asarray(flat_idx)
    lengths = 0.5 ** jnp.arange(MAX_HALVINGS)

    def residual(x):
        return jets_fn(x).reshape(-1)[flat_idx] - target

    def cond_fn(state):
        _, res, it, bad = state
        return (res > tol) & (it < max_iter) & ~bad

    def body(state):
        x, res, it, _ = state
        r, jmat = residual(x), jax.jacfwd(residual)(x)
        svals = jnp.linalg.svd(jmat, compute_uv=False)
        singular = ~(svals[-1] * cond_max > svals[0])
        step = jnp.linalg.solve(jmat, r)
        trials = x[None, :] - lengths[:, None] * step[None, :]
        norms = jax.vmap(lambda z: jnp.linalg.norm(residual(z)))(trials)
        better = norms < res
        pick = jnp.argmax(better)
        bad = singular | ~jnp.any(better)
        return jnp.where(bad, x, trials[pick]), jnp.where(bad, res, norms[pick]), it + 1, bad

    res0 = jnp.linalg.norm(residual(guess))
    x, res, it, _ = jax.lax.while_loop(cond_fn, body, (guess, res0, 0, ~jnp.isfinite(res0)))
    return x, res, it, (res <= tol) & jnp.all(jnp.isfinite(x))


class MeldMaps:
    """Compiled jet map of one meld, its Jacobian and its Newton inverse."""

    def __init__(self, sys: ControlAffineSystem, degrees: Sequence[int], choice, cond_max: float = COND_MAX):
        self.sys = sys
        self.evaluator = deck_evaluator(sys, degrees)
        self.choice = choice
        self.indices = tuple(getattr(choice, "indices", choice))
        self.flat = self.evaluator.flat_index(self.indices)
        if len(self.flat) != sys.n:
            raise UndefinedRelativeDegree(
                f"selected relative degrees sum to {len(self.flat)}, state dimension is {sys.n}"
            )
        self.cond_max = float(cond_max)
        self._flat = jnp.asarray(self.flat)

    def phi(self, x) -> np.ndarray:
        return np.asarray(self.evaluator.meld_phi(self._flat, _vec(x, self.sys.n)))

    def jacobian(self, x) -> np.ndarray:
        return np.asarray(self.evaluator.meld_jac(_vec(x, self.sys.n), self._flat))

    def psi(self, target, guess) -> np.ndarray:
        target = _vec(target, self.sys.n)
        x, res, it, ok = self.evaluator.meld_solve(self._flat, target, _vec(guess, self.sys.n), self.cond_max)
        if not bool(ok):
            raise InversionFailure(
                f"Newton inversion of meld {self.choice} stalled after {int(it)} iterations, residual {float(res):.3g}"
            )
        return np.asarray(x)

    def theta(self, i: int, target, guess) -> np.ndarray:
        x = self.psi(target, guess)
        r = self.evaluator.degrees[i]
        return np.asarray(self.evaluator.jets_traced(x))[i, :r]


def _vec(x, n):
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise DimensionMismatch(f"expected a vector of length {n}, got shape {x.shape}")
    return x


def _maps(sys, choice, degrees):
    if degrees is None or any(r is None for r in degrees):
        raise UndefinedRelativeDegree("the jet maps need every deck relative degree")
    key = (id(sys), tuple(degrees), tuple(getattr(choice, "indices", choice)))
    entry = _CACHE.get(key)
    if entry is None or entry[0] is not sys:
        entry = (sys, MeldMaps(sys, degrees, choice))
        _CACHE[key] = entry
    return entry[1]


def phi_map(sys: ControlAffineSystem, choice, x, degrees: Sequence[int]) -> np.ndarray:
    """Stacked output jets of the selected outputs at ``x``."""
    return _maps(sys, choice, degrees).phi(x)


def psi_map(sys: ControlAffineSystem, choice, target, x_guess, degrees: Sequence[int]) -> np.ndarray:
    """State whose meld jets equal ``target``; Newton from ``x_guess``."""
    return _maps(sys, choice, degrees).psi(target, x_guess)


def theta_map(sys: ControlAffineSystem, i: int, choice, ybar_sigma, x_guess, degrees: Sequence[int]) -> np.ndarray:
    """Jets of deck output ``i`` at the state reconstructed from the meld jets."""
    if not 0 <= i < sys.q:
        raise IndexError(f"output index {i} outside deck of size {sys.q}")
    return _maps(sys, choice, degrees).theta(i, ybar_sigma, x_guess)


CHUNK = 1024


def _chi_scan(ev):
    if not hasattr(ev, "chi_scan"):
        jets = ev.jets_traced

        def run(carry, flats, targets, fallbacks, cond_max):
            def step(carry, inputs):
                prev, prev_ok = carry
                flat, target, fallback = inputs
                # a stale warm start gets one more chance from the fallback state;
                # both attempts share one traced Newton solve
                def attempt(state):
                    tries, _, _ = state
                    guess = jnp.where(prev_ok & (tries == 0), prev, fallback)
                    x, _, _, ok = newton_solve(jets, flat, target, guess, cond_max=cond_max)
                    return tries + 1, x, ok

                start = (jnp.int32(0), fallback, jnp.bool_(False))
                _, x, ok = jax.lax.while_loop(lambda s: ~s[2] & (s[0] < 2), attempt, start)
                return (jnp.where(ok, x, fallback), ok), (jnp.where(ok, x, jnp.nan), ok)

            return jax.lax.scan(step, carry, (flats, targets, fallbacks))

        ev.chi_scan = jax.jit(run)
    return ev.chi_scan


def _padded_chunks(arrays, size):
    total = len(arrays[0])
    for start in range(0, total, size):
        stop = min(start + size, total)
        out = []
        for a in arrays:
            block = a[start:stop]
            if stop - start < size:
                block = np.concatenate([block, np.repeat(block[-1:], size - (stop - start), axis=0)])
            out.append(block)
        yield stop - start, out


def reference_states(sys: ControlAffineSystem, degrees, flats, targets, x_start, fallbacks=None, cond_max=COND_MAX):
    """Newton inverses of a sequence of meld jets, each warm-started from the previous one.

    ``flats[t]`` are the jet positions of the meld active at step t and
    ``targets[t]`` the jets to invert. A solve that fails from the warm
    start is retried from ``fallbacks[t]`` (default: ``x_start``); rows that
    still fail are NaN and the next row starts from its fallback.
    """
    ev = deck_evaluator(sys, degrees)
    flats = np.asarray(flats, dtype=int)
    targets = np.asarray(targets, dtype=float)
    if flats.shape != targets.shape or flats.ndim != 2 or flats.shape[1] != sys.n:
        raise DimensionMismatch("flats and targets must both have shape (T, n)")
    x_start = _vec(x_start, sys.n)
    if fallbacks is None:
        fallbacks = np.broadcast_to(x_start, targets.shape)
    fallbacks = np.asarray(fallbacks, dtype=float)
    scan = _chi_scan(ev)
    carry = (jnp.asarray(x_start), jnp.array(True))
    xs, oks = [], []
    for used, (f, t, fb) in _padded_chunks((flats, targets, fallbacks), CHUNK):
        carry, (x, ok) = scan(carry, f, t, fb, float(cond_max))
        xs.append(np.asarray(x)[:used])
        oks.append(np.asarray(ok)[:used])
    return np.concatenate(xs), np.concatenate(oks)
