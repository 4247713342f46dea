"""Lie derivatives, relative degrees and interaction matrices.

Every derivative here is a forward-mode lift: ``L_v h(x)`` is the tangent of
``h`` pushed through one dual-number sweep seeded with ``v(x)``, and higher
orders nest that sweep. The evaluators of a :class:`ControlAffineSystem` must
therefore be JAX-traceable (written against ``jax.numpy``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .errors import (
    DimensionMismatch,
    NonFiniteEvaluation,
    OrderOverflow,
    UndefinedRelativeDegree,
)

K_MAX = 8
VANISH_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ControlAffineSystem:
    """dx/dt = f(x) + sum_j g_j(x) u_j with a deck of scalar outputs h_i(x)."""

    n: int
    m: int
    f: Callable
    g: Sequence[Callable]
    deck_h: Sequence[Callable]
    output_names: Sequence[str] = ()
    k_max: int = K_MAX

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(self.g))
        object.__setattr__(self, "deck_h", tuple(self.deck_h))
        names = tuple(self.output_names) or tuple(f"y{i + 1}" for i in range(len(self.deck_h)))
        object.__setattr__(self, "output_names", names)
        if self.n < 1 or self.m < 1:
            raise ValueError("state and input dimensions must be positive")
        if len(self.g) != self.m:
            raise DimensionMismatch(f"expected {self.m} input fields, got {len(self.g)}")
        if len(self.deck_h) <= self.m:
            raise DimensionMismatch("the deck must hold strictly more outputs than inputs")
        if len(names) != len(self.deck_h):
            raise DimensionMismatch("one name per deck output")

    @property
    def q(self) -> int:
        return len(self.deck_h)

    def deck(self, x):
        return jnp.stack([jnp.asarray(h(x)) for h in self.deck_h])

    def input_matrix(self, x):
        return jnp.stack([gj(x) for gj in self.g], axis=1)

    def vector_field(self, x, u):
        return self.f(x) + self.input_matrix(x) @ u

    def index(self, name: str) -> int:
        return self.output_names.index(name)


@dataclass
class JetValue:
    """Output value with its drift Lie derivatives L_f^k h, k = 1..order."""

    value: float
    partials: np.ndarray


@dataclass
class RelativeDegreeReport:
    r: int | None
    witness_row: np.ndarray
    vanished_orders: list = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return self.r is not None


def _lift(fn, vf):
    def lifted(x):
        return jax.jvp(fn, (x,), (vf(x),))[1]

    return lifted


def _tower(fn, vf, order):
    """x -> stacked [fn, L fn, ..., L^order fn] along the field ``vf``."""

    def base(x):
        return fn(x)[None]

    tower = base
    for _ in range(order):
        tower = _extend(tower, vf)
    return tower


def _extend(tower, vf):
    def extended(x):
        primal, tangent = jax.jvp(tower, (x,), (vf(x),))
        return jnp.concatenate([primal[:1], tangent], axis=0)

    return extended


# pointwise towers run a handful of times per state; a cheap compile beats fast code here
POINTWISE_JIT = partial(jax.jit, static_argnums=(0, 1), compiler_options={"xla_backend_optimization_level": 0})


@POINTWISE_JIT
def _drift_tower(sys, order, x):
    return _tower(sys.deck, sys.f, order)(x)


@POINTWISE_JIT
def _mixed_tower(sys, order, x):
    # [k, i, j] = L_{g_j} L_f^k h_i
    tower = _tower(sys.deck, sys.f, order)
    cols = [jax.jvp(tower, (x,), (gj(x),))[1] for gj in sys.g]
    return jnp.stack(cols, axis=-1)


def _state(sys, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise DimensionMismatch(f"state must have shape ({sys.n},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteEvaluation("non-finite state")
    return x


def _finite(value, what):
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        raise NonFiniteEvaluation(f"non-finite value while evaluating {what}")
    return value


def _check_order(sys, k):
    if k < 0:
        raise OrderOverflow("order must be nonnegative")
    if k > sys.k_max:
        raise OrderOverflow(f"order {k} exceeds k_max={sys.k_max}")


def _check_output(sys, i):
    if not 0 <= i < sys.q:
        raise IndexError(f"output index {i} outside deck of size {sys.q}")


def lie_f(sys: ControlAffineSystem, i: int, k: int, x) -> float:
    """L_f^k h_i(x). Order zero is a plain (unlifted) evaluation of h_i."""
    _check_output(sys, i)
    _check_order(sys, k)
    x = _state(sys, x)
    if k == 0:
        return float(_finite(sys.deck_h[i](x), f"h_{i}"))
    return float(_finite(_drift_tower(sys, k, x)[k, i], f"L_f^{k} h_{i}"))


def lie_g_lie_f(sys: ControlAffineSystem, i: int, j: int, k: int, x) -> float:
    """L_{g_j} L_f^k h_i(x)."""
    _check_output(sys, i)
    _check_order(sys, k)
    if not 0 <= j < sys.m:
        raise IndexError(f"input index {j} outside 0..{sys.m - 1}")
    x = _state(sys, x)
    return float(_finite(_mixed_tower(sys, k, x)[k, i, j], f"L_g{j} L_f^{k} h_{i}"))


def lie_tower(sys: ControlAffineSystem, i: int, x, order: int) -> JetValue:
    _check_output(sys, i)
    _check_order(sys, order)
    x = _state(sys, x)
    value = float(_finite(sys.deck_h[i](x), f"h_{i}"))
    if order == 0:
        return JetValue(value, np.zeros(0))
    tower = _finite(_drift_tower(sys, order, x)[:, i], f"tower of h_{i}")
    return JetValue(value, tower[1:].copy())


def relative_degree(
    sys: ControlAffineSystem,
    i: int,
    x,
    r_max: int | None = None,
    tol: float = VANISH_TOL,
    n_neighbors: int = 16,
    radius: float = 1e-3,
    seed: int = 0,
) -> RelativeDegreeReport:
    """Relative degree of output ``i`` at ``x``.

    Orders are scanned upward; the first at which some L_{g_j} L_f^{r-1} h_i
    exceeds ``tol`` is the candidate, and ``vanished_orders`` lists the orders
    below it. The candidate is kept only if all lower mixed derivatives also vanish at
    ``n_neighbors`` random points within ``radius`` of ``x`` (box metric).
    """
    _check_output(sys, i)
    r_max = sys.n if r_max is None else r_max
    if r_max < 1:
        raise ValueError("r_max must be at least 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_order(sys, r_max - 1)
    x = _state(sys, x)

    # scan upward one order at a time; deep nested lifts are expensive to trace,
    # but the first lift is cheap next to compiling two towers, so start at order one
    vanished, r, witness = [], None, np.zeros(sys.m)
    towers = {}
    for k in range(r_max):
        order = min(max(k, 1), r_max - 1)
        if order not in towers:
            towers[order] = _finite(_mixed_tower(sys, order, x), "mixed Lie derivatives")
        row = towers[order][k, i, :]
        if np.max(np.abs(row)) > tol:
            r, witness = k + 1, row.copy()
            break
        vanished.append(k)
    if r is None:
        return RelativeDegreeReport(None, witness, vanished)

    if r > 1 and n_neighbors > 0:
        rng = np.random.default_rng(seed)
        for _ in range(n_neighbors):
            xp = x + radius * rng.uniform(-1.0, 1.0, size=sys.n)
            lower = np.asarray(_mixed_tower(sys, r - 1, xp))[: r - 1, i, :]
            if not np.all(np.isfinite(lower)) or np.max(np.abs(lower)) > tol:
                return RelativeDegreeReport(None, witness, vanished)
    return RelativeDegreeReport(r, witness, vanished)


def deck_relative_degrees(sys: ControlAffineSystem, x, **kwargs) -> tuple:
    """Relative degrees of every deck output at ``x`` (``None`` where undefined)."""
    return tuple(relative_degree(sys, i, x, **kwargs).r for i in range(sys.q))


def _indices(choice) -> tuple:
    idx = getattr(choice, "indices", choice)
    return tuple(int(i) for i in idx)


def _selected_degrees(sys, x, indices, degrees):
    if degrees is None:
        degrees = {i: relative_degree(sys, i, x).r for i in indices}
    else:
        degrees = {i: degrees[i] for i in indices}
    undefined = [sys.output_names[i] for i, r in degrees.items() if r is None]
    if undefined:
        raise UndefinedRelativeDegree(f"relative degree undefined for {undefined}")
    return degrees


def drift_vector(sys: ControlAffineSystem, choice, x, degrees=None) -> np.ndarray:
    """Stacked L_f^{r_i} h_i(x) over the selected outputs, in index order."""
    indices = _indices(choice)
    x = _state(sys, x)
    degrees = _selected_degrees(sys, x, indices, degrees)
    order = max(degrees.values())
    _check_order(sys, order)
    tower = _finite(_drift_tower(sys, order, x), "drift vector")
    return np.array([tower[degrees[i], i] for i in indices])


def full_interaction_matrix(sys: ControlAffineSystem, x, degrees=None) -> np.ndarray:
    """The q x m matrix of L_{g_j} L_f^{r_i - 1} h_i over the whole deck."""
    return interaction_rows(sys, tuple(range(sys.q)), x, degrees)


def interaction_matrix(sys: ControlAffineSystem, choice, x, degrees=None) -> np.ndarray:
    indices = _indices(choice)
    if len(indices) != sys.m:
        raise DimensionMismatch(
            f"only square choices are supported: selected {len(indices)} outputs for {sys.m} inputs"
        )
    return interaction_rows(sys, indices, x, degrees)


def interaction_rows(sys: ControlAffineSystem, indices, x, degrees=None) -> np.ndarray:
    """Interaction rows of any subset of outputs, in the given order."""
    x = _state(sys, x)
    degrees = _selected_degrees(sys, x, indices, degrees)
    order = max(degrees.values()) - 1
    _check_order(sys, order)
    mixed = _finite(_mixed_tower(sys, order, x), "interaction matrix")
    return np.stack([mixed[degrees[i] - 1, i, :] for i in indices])


class DeckEvaluator:
    """Compiled evaluation of every deck quantity at fixed relative degrees.

    One call returns the padded jet array ``jets[i, k] = L_f^k h_i`` for
    ``k < r_i``, the drift terms ``b_i = L_f^{r_i} h_i`` and the full
    interaction matrix. ``traced`` is the uncompiled function for use inside
    other JAX transformations; ``jets_traced`` computes the jets alone.
    """

    def __init__(self, sys: ControlAffineSystem, degrees: Sequence[int]):
        degrees = tuple(int(r) for r in degrees)
        if len(degrees) != sys.q or min(degrees) < 1:
            raise UndefinedRelativeDegree("every deck output needs a defined relative degree")
        if max(degrees) > sys.k_max:
            raise OrderOverflow("relative degree exceeds k_max")
        self.sys = sys
        self.degrees = degrees
        self.r_max = max(degrees)
        r = np.array(degrees)
        self._mask = jnp.asarray(np.arange(self.r_max)[None, :] < r[:, None], dtype=float)
        self._rows = jnp.asarray(r - 1)
        self._cols = jnp.arange(sys.q)
        self.traced = self._build()
        self.jets_traced = self._build_jets()
        self._compiled = jax.jit(self.traced)
        self._jet_jac = jax.jit(jax.jacfwd(lambda x: self.jets_traced(x).reshape(-1)))

    def _build(self):
        sys, r_max = self.sys, self.r_max
        tower = _tower(sys.deck, sys.f, r_max - 1)

        def evaluate(x):
            dirs = jnp.stack([sys.f(x)] + [gj(x) for gj in sys.g])
            primal, tangents = jax.vmap(lambda v: jax.jvp(tower, (x,), (v,)))(dirs)
            # primal rows: h, ..., L_f^{r_max-1} h; tangent[0] lifts once more along f
            full = jnp.concatenate([primal[0][:1], tangents[0]], axis=0)
            jets = full[:r_max].T * self._mask
            b = full[self._rows + 1, self._cols]
            amat = tangents[1:][:, self._rows, self._cols].T
            return jets, b, amat

        return evaluate

    def _build_jets(self):
        tower = _tower(self.sys.deck, self.sys.f, self.r_max - 1)

        def jets(x):
            return tower(x).T * self._mask

        return jets

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        jets, b, amat = (np.asarray(a) for a in self._compiled(x))
        if not (np.all(np.isfinite(jets)) and np.all(np.isfinite(b)) and np.all(np.isfinite(amat))):
            raise NonFiniteEvaluation("non-finite deck evaluation")
        return jets, b, amat

    def jet_jacobian(self, x) -> np.ndarray:
        """d(jets.reshape(-1))/dx, shape (q * r_max, n)."""
        return np.asarray(self._jet_jac(np.asarray(x, dtype=float)))

    def flat_index(self, choice) -> np.ndarray:
        """Positions of the stacked meld jets inside ``jets.reshape(-1)``."""
        return np.array(
            [i * self.r_max + k for i in _indices(choice) for k in range(self.degrees[i])],
            dtype=int,
        )

    def jet_slices(self, choice):
        """(output index, slice into the stacked meld jet) pairs."""
        out, start = [], 0
        for i in _indices(choice):
            out.append((i, slice(start, start + self.degrees[i])))
            start += self.degrees[i]
        return out


@partial(jax.jit, static_argnums=(0, 1))
def _degree_pattern(sys, degrees, tol, x):
    # True per output when the lower mixed derivatives vanish and order r-1 does not
    order = max(degrees) - 1
    mixed = jnp.abs(_mixed_tower(sys, order, x)).max(axis=-1)
    flags = []
    for i, r in enumerate(degrees):
        lower_ok = jnp.all(mixed[: r - 1, i] <= tol) if r > 1 else True
        flags.append(jnp.logical_and(lower_ok, mixed[r - 1, i] > tol))
    return jnp.stack(flags)


def degrees_hold(sys: ControlAffineSystem, degrees: Sequence[int], x, tol: float = VANISH_TOL):
    """Pointwise test that each output keeps the given relative degree at ``x``.

    ``x`` may be a single state or a batch of shape (N, n); the result is a
    boolean array of shape (q,) or (N, q).
    """
    degrees = tuple(int(r) for r in degrees)
    if len(degrees) != sys.q or min(degrees) < 1:
        raise UndefinedRelativeDegree("degree pattern needs one positive entry per output")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.asarray(_degree_pattern(sys, degrees, tol, _state(sys, x)))
    if x.ndim != 2 or x.shape[1] != sys.n:
        raise DimensionMismatch(f"states must have shape (N, {sys.n})")
    batched = jax.vmap(lambda z: _degree_pattern(sys, degrees, tol, z))
    return np.asarray(batched(x))
