import numpy as np
import pytest

from meldctl.errors import DimensionMismatch, IndexOutOfRange
from meldctl.melds import Choice
from meldctl.schedule import SwitchSchedule, shared_outputs

A, B, C = (Choice.parse(b) for b in ("1110000", "0011100", "0100011"))


def test_shared_outputs_examples():
    s = SwitchSchedule([0.0, 4.0, 7.0], [A, B, C])
    assert shared_outputs(s, 0, 1) == (2,)
    assert shared_outputs(s, 1, 1) == ()
    assert shared_outputs(s, 0, 0) == (0, 1, 2)
    assert shared_outputs(s, 0, 2) == ()
    with pytest.raises(IndexOutOfRange):
        shared_outputs(s, 2, 1)


def test_interval_lookup():
    s = SwitchSchedule([0.0, 4.0, 7.0], [A, B, C])
    assert s.meld_at(-1.0) == A and s.meld_at(4.0) == B and s.meld_at(100.0) == C
    np.testing.assert_array_equal(s.interval_of(np.array([0.0, 3.999, 4.0, 8.0])), [0, 0, 1, 2])
    assert s.end_of(0) == 4.0 and s.end_of(2) == np.inf
    np.testing.assert_array_equal(s.step_indices(1e-3), [0, 4000, 7000])


def test_invalid_schedules():
    with pytest.raises(ValueError):
        SwitchSchedule([0.0, 0.0], [A, B])
    with pytest.raises(DimensionMismatch):
        SwitchSchedule([0.0, 1.0], [A])


def test_certify_stretches_short_intervals():
    s = SwitchSchedule([0.0, 4.0, 7.0, 9.0], [A, B, C, A])
    assert not s.mark(5.0, 2.5).certified
    c = s.certify(5.0, 2.5)
    np.testing.assert_allclose(np.diff(c.instants), [5.0, 3.0, 2.5])
    assert c.certified
    assert s.certify(1.0, 1.0).instants.tolist() == s.instants.tolist()


def test_certify_rounds_to_grid():
    s = SwitchSchedule([0.0, 1.0, 2.0], [A, B, C])
    c = s.certify(1.23456, 1.0001, grid=1e-3)
    np.testing.assert_allclose(np.diff(c.instants), [1.235, 1.001])
    assert np.all(np.diff(c.instants) >= c.dwell)
