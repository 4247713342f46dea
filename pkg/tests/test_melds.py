import time
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import HOME
from meldctl.errors import DimensionMismatch, SizeOverflow
from meldctl.melds import (
    Choice,
    ValidityTester,
    certify_meld,
    compatible_at,
    enumerate_melds,
    meld_report_csv,
    selection_matrix,
    square_choices,
    validity_membership,
)

NAMED = {
    "joints": "1110000",
    "q3 with gripper 1": "0011100",
    "q2 with gripper 2": "0100011",
    "q3 with gripper 2": "0010011",
    "q1 with gripper 2": "1000011",
}


@given(st.integers(2, 9), st.integers(1, 8))
@settings(max_examples=40, deadline=None)
def test_square_choice_count(q, p):
    if p >= q:
        with pytest.raises(ValueError):
            square_choices(q, p)
        return
    choices = square_choices(q, p)
    assert len(choices) == comb(q, p) == len(set(choices))
    assert all(c.size == p and c.q == q for c in choices)


def test_choice_round_trips_and_selection():
    c = Choice.parse("0011100")
    assert c.indices == (2, 3, 4)
    assert Choice.from_indices(7, (2, 3, 4)) == c
    assert str(c) == "0011100"
    gamma = selection_matrix(c)
    y = np.arange(7.0)
    np.testing.assert_array_equal(gamma @ y, [2.0, 3.0, 4.0])
    np.testing.assert_array_equal(gamma @ gamma.T, np.eye(3))
    with pytest.raises(ValueError):
        Choice.parse("0120")
    with pytest.raises(SizeOverflow):
        Choice((1,) * 32)
    with pytest.raises(DimensionMismatch):
        selection_matrix(c, 6)


def test_named_melds_certified_at_home(arm):
    report = enumerate_melds(arm.system, HOME)
    assert len(report.certificates) == 35
    assert len(report.melds) + len(report.rejected) == 35
    melds = {c.sigma.bitstring for c in report.melds}
    for name, bits in NAMED.items():
        if bits == "1000011":
            continue
        assert bits in melds, name
    # q1 with gripper 2 needs q3 off zero: its interaction determinant carries sin(q3)
    cert = report.find(Choice.parse("1000011"))
    assert not cert.is_meld and cert.reject_reason == "singular-A"
    assert certify_meld(arm.system, Choice.parse("1000011"), np.array([0.5, 0.6, 0.8, 0, 0, 0])).is_meld


def test_rejections_are_rank_deficient(arm):
    report = enumerate_melds(arm.system, HOME)
    for cert in report.rejected:
        assert cert.degree_sum == 6
        assert cert.cond_A >= 1e12 or abs(cert.det_A) < 1e-12


def test_enumeration_agrees_with_single_certification(arm):
    report = enumerate_melds(arm.system, HOME)
    for cert in report.certificates[::5]:
        single = certify_meld(arm.system, cert.sigma, HOME)
        assert single.is_meld == cert.is_meld
        assert single.det_A == pytest.approx(cert.det_A, abs=1e-12)


def test_second_sweep_is_fast(arm):
    enumerate_melds(arm.system, HOME)
    start = time.perf_counter()
    enumerate_melds(arm.system, HOME)
    assert time.perf_counter() - start < 1.0


def test_report_csv(arm):
    text = meld_report_csv(enumerate_melds(arm.system, HOME))
    lines = text.strip().split("\n")
    assert lines[0] == "sigma_bits,degree_sum,det_A,cond_A,is_meld,reject_reason"
    assert len(lines) == 36
    assert any(line.startswith("1110000,6,") and ",1," in line for line in lines)


def test_double_integrator_melds(dint):
    report = enumerate_melds(dint.system, np.zeros(2))
    assert [c.sigma.bitstring for c in report.melds] == ["10"]
    assert report.find(Choice.parse("01")).reject_reason == "degree-sum"


def test_non_square_choice_rejected(arm):
    with pytest.raises(DimensionMismatch):
        certify_meld(arm.system, Choice.parse("1100000"), HOME)
    with pytest.raises(DimensionMismatch):
        certify_meld(arm.system, Choice.parse("111000"), HOME)


def test_joint_meld_valid_everywhere(arm):
    rng = np.random.default_rng(12)
    x = rng.uniform(arm.box_lo, arm.box_hi, size=(1000, 6))
    assert np.all(validity_membership(arm.system, Choice.parse("1110000"), x, HOME))


def test_gripper_meld_invalid_at_its_singularity(arm):
    cert = certify_meld(arm.system, Choice.parse("1000011"), np.array([0.5, 0.6, 0.8, 0, 0, 0]))
    tester = ValidityTester(arm.system, cert, (2,) * 7)
    assert tester(np.array([0.5, 0.6, 0.8, 0, 0, 0]))
    assert not tester(np.array([0.5, 0.6, 0.0, 0, 0, 0]))
    with pytest.raises(ValueError):
        ValidityTester(arm.system, certify_meld(arm.system, Choice.parse("1000011"), HOME), (2,) * 7)


def test_compatibility_is_joint_validity(arm):
    a, b = Choice.parse("1110000"), Choice.parse("0011100")
    x = np.array([0.3, 1.0, 0.6, 0.0, 0.0, 0.0])
    assert compatible_at(arm.system, a, b, x, HOME)
    # the second gripper meld loses rank once the last link is folded straight
    assert not compatible_at(arm.system, a, Choice.parse("1000011"), HOME, HOME, np.array([0.5, 0.6, 0.8, 0, 0, 0]))
