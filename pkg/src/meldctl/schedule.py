"""Piecewise-constant meld schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange

SNAP_EPS = 1e-9


@dataclass(eq=False)
class SwitchSchedule:
    """Meld ``melds[k]`` is active on [instants[k], instants[k + 1]); the last one never ends.

    ``instants[0]`` is the start time t0, so a schedule without switches has
    one instant and one meld. ``dwell`` holds the certified lower bounds
    (tau_0, tau_bar, tau_bar, ...) when the schedule has been checked against
    a dwell certificate.
    """

    instants: np.ndarray
    melds: list
    dwell: np.ndarray = field(default=None)

    def __post_init__(self):
        self.instants = np.asarray(self.instants, dtype=float).reshape(-1)
        self.melds = list(self.melds)
        if len(self.instants) == 0:
            raise ValueError("a schedule needs a start time")
        if len(self.melds) != len(self.instants):
            raise DimensionMismatch("one meld per interval, the first starting at t0")
        if np.any(np.diff(self.instants) <= 0):
            raise ValueError("switching instants must be strictly increasing")
        if self.dwell is not None:
            self.dwell = np.asarray(self.dwell, dtype=float)

    @property
    def t0(self) -> float:
        return float(self.instants[0])

    @property
    def n_intervals(self) -> int:
        return len(self.instants)

    @property
    def switch_times(self) -> np.ndarray:
        return self.instants[1:]

    @property
    def certified(self) -> bool:
        return self.dwell is not None and bool(np.all(np.diff(self.instants) >= self.dwell[: len(self.instants) - 1] - 1e-12))

    def interval_of(self, t) -> np.ndarray | int:
        k = np.searchsorted(self.instants, t, side="right") - 1
        return np.maximum(k, 0) if np.ndim(k) else max(int(k), 0)

    def meld_at(self, t):
        return self.melds[self.interval_of(t)]

    def end_of(self, k: int) -> float:
        return float(self.instants[k + 1]) if k + 1 < len(self.instants) else np.inf

    def step_indices(self, dt: float) -> np.ndarray:
        """Grid index at which each interval starts (instants snapped down to the grid)."""
        return np.floor((self.instants - self.t0) / dt + SNAP_EPS).astype(int)

    def dwell_bounds(self, tau0: float, tau_bar: float) -> np.ndarray:
        bounds = np.full(max(len(self.instants) - 1, 0), float(tau_bar))
        if len(bounds):
            bounds[0] = tau0
        return bounds

    def certify(self, tau0: float, tau_bar: float, grid: float | None = None) -> "SwitchSchedule":
        """Stretch intervals so that t_{k+1} - t_k >= max(requested, tau_k).

        With ``grid`` every stretched gap is rounded up to a whole number of
        steps, so snapping the instants to the grid cannot shorten a dwell.
        """
        bounds = self.dwell_bounds(tau0, tau_bar)
        gaps = np.maximum(np.diff(self.instants), bounds)
        if grid is not None:
            stretched = gaps > np.diff(self.instants)
            gaps[stretched] = np.ceil(gaps[stretched] / grid - SNAP_EPS) * grid
        instants = np.concatenate([[self.t0], self.t0 + np.cumsum(gaps)])
        return SwitchSchedule(instants, self.melds, bounds)

    def mark(self, tau0: float, tau_bar: float) -> "SwitchSchedule":
        """Same instants, annotated with the dwell bounds they are checked against."""
        return SwitchSchedule(self.instants, self.melds, self.dwell_bounds(tau0, tau_bar))


def shared_outputs(schedule: SwitchSchedule, k: int, l: int) -> tuple:
    """Output indices selected throughout intervals k, ..., k + l."""
    if k < 0 or l < 0 or k + l >= schedule.n_intervals:
        raise IndexOutOfRange(f"intervals {k}..{k + l} outside a schedule of {schedule.n_intervals}")
    common = set(schedule.melds[k].indices)
    for j in range(k + 1, k + l + 1):
        common &= set(schedule.melds[j].indices)
    return tuple(sorted(common))
