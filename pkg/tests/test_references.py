import numpy as np
import pytest

import oracles
from meldctl.references import JointPath, ReferenceBundle, rest_blend


def path():
    return JointPath(np.array([[0.0, 0.8, 0.0], [0.3, 1.0, 0.6], [0.1, 0.5, 0.2]]), [1.0, 3.0], 1.5)


def test_rest_blend_endpoints():
    assert rest_blend(0.0) == 0.0 and rest_blend(1.0) == 1.0
    assert rest_blend(0.5) == pytest.approx(0.5)
    # the first three derivatives vanish at both ends, so joins between segments are C3
    poly = np.polynomial.Polynomial([0, 0, 0, 0, 35, -84, 70, -20])
    grid = np.linspace(0.0, 1.0, 11)
    np.testing.assert_allclose(rest_blend(grid), poly(grid), atol=1e-14)
    for k in (1, 2, 3):
        assert poly.deriv(k)(0.0) == 0.0 and abs(poly.deriv(k)(1.0)) < 1e-9


def test_path_rests_between_moves():
    p = path()
    np.testing.assert_allclose(p.position(0.0), [0.0, 0.8, 0.0])
    np.testing.assert_allclose(p.position(2.7), [0.3, 1.0, 0.6])
    np.testing.assert_allclose(p.position(9.0), [0.1, 0.5, 0.2])


def test_bad_paths():
    with pytest.raises(ValueError):
        JointPath(np.zeros((3, 3)), [1.0, 1.5], 1.0)
    with pytest.raises(ValueError):
        JointPath(np.zeros((2, 3)), [1.0], 0.0)


def test_jets_are_consistent_time_derivatives(arm):
    refs = ReferenceBundle(arm, path(), (2,) * 7)
    dt = 1e-4
    times = np.linspace(1.1, 2.4, 30)
    jets = refs.jets_on(times)
    before, after = refs.jets_on(times - dt), refs.jets_on(times + dt)
    for k in range(2):
        np.testing.assert_allclose(jets[:, :, k + 1], (after[:, :, k] - before[:, :, k]) / (2 * dt), atol=1e-6)


def test_deck_jets_follow_desired_state(arm):
    refs = ReferenceBundle(arm, path(), (2,) * 7)
    for t in (0.0, 1.7, 3.9):
        x = refs.state(t)
        jets = refs.jets(t)
        np.testing.assert_allclose(jets[:, 0], oracles.deck(x)[0], atol=1e-14)
        np.testing.assert_allclose(jets[:3, 1], x[3:], atol=1e-14)
    assert refs.consistent


def test_offsets_shift_only_values(arm):
    refs = ReferenceBundle(arm, path(), (2,) * 7)
    shifted = refs.with_offsets(np.array([0, 0, 0, 0.1, 0, 0, 0]))
    assert not shifted.consistent
    d = shifted.jets(1.5) - refs.jets(1.5)
    assert d[3, 0] == pytest.approx(0.1)
    d[3, 0] = 0.0
    np.testing.assert_allclose(d, 0.0, atol=1e-15)


def test_retimed_moves_segments(arm):
    refs = ReferenceBundle(arm, path(), (2,) * 7).retimed([2.0, 5.0])
    np.testing.assert_allclose(refs.state(1.9)[:3], [0.0, 0.8, 0.0])
    np.testing.assert_allclose(refs.state(4.0)[:3], [0.3, 1.0, 0.6])
