import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from henonlab.extended import (ExtendedEngine, IntervalSet, TwoDConfig, continue_critical,
                               direct_critical, image_curve, max_multiplicity, minimal_cover)
from henonlab.family import ConstantBudget
from henonlab.onedim import ExactEngine1D, param_phase_map

DELTA = math.exp(-5)

ivs = st.lists(st.tuples(st.integers(0, 40), st.integers(1, 12)).map(lambda t: (t[0], t[0] + t[1])),
               max_size=8)


def members(intervals, grid):
    out = np.zeros(len(grid), dtype=bool)
    for a, b in intervals:
        out |= (grid >= a) & (grid <= b)
    return out


GRID = np.arange(0, 60, 0.25) + 0.125


@settings(max_examples=200, deadline=None)
@given(ivs, ivs)
def test_interval_set_algebra_matches_membership(A, B):
    SA, SB = IntervalSet(A), IntervalSet(B)
    np.testing.assert_array_equal(members(SA.minus(SB).iv, GRID),
                                  members(A, GRID) & ~members(B, GRID))
    np.testing.assert_array_equal(members(SA.union(SB).iv, GRID), members(A + B, GRID))
    assert SA.measure() == pytest.approx(members(A, GRID).sum() * 0.25)


@settings(max_examples=200, deadline=None)
@given(ivs)
def test_minimal_cover_keeps_union_with_low_multiplicity(A):
    idx = minimal_cover(A)
    sub = [A[i] for i in idx]
    assert IntervalSet(sub) == IntervalSet(A)
    if sub:
        # open interiors: touching endpoints do not count as overlap
        assert max_multiplicity([(a + 1e-9, b - 1e-9) for a, b in sub]) <= 2


def test_lowest_point():
    S = IntervalSet([(0, 1), (2, 3)])
    assert S.lowest_in(1.5, 2.5) == 2
    assert S.lowest_in(1.2, 1.8) is None


def test_zero_b_family_is_the_origin():
    fam = continue_critical(1.99, 2.0, 0.0, 0, 6, DELTA)
    x, y = fam.at(np.array([1.99, 1.995, 2.0]))
    assert np.all(x == 0) and np.all(y == 0)
    X, _ = image_curve(fam, np.array([1.993]), 7)
    assert X[0] == param_phase_map(1.993, 7)


@pytest.fixture(scope="module")
def fam():
    lo = 2 - 2 ** -17
    return continue_critical(lo, lo + 2 ** -24, 1e-6, 0, 6, DELTA)


def test_continuation_matches_direct_solves(fam):
    a = fam.lo + 0.7 * (fam.hi - fam.lo)
    assert np.linalg.norm(fam.point(a) - direct_critical(a, 1e-6, 0, 6, DELTA)) < 1e-12
    assert fam.residual < 1e-12


def test_image_curve_derivative(fam):
    a = np.array([fam.lo + 0.3 * (fam.hi - fam.lo)])
    h = 1e-11
    x, _, dx, _ = image_curve(fam, a, 8, True)
    xp, _ = image_curve(fam, a + h, 8)
    xm, _ = image_curve(fam, a - h, 8)
    assert dx[0] == pytest.approx((xp[0] - xm[0]) / (2 * h), rel=1e-4)


def test_zero_b_engine_reproduces_the_exact_1d_engine():
    bud = ConstantBudget.make()
    lo, hi = 2 - 2 ** -27, 2.0
    e1 = ExactEngine1D(lo, hi, bud, rule="essential")
    e2 = ExtendedEngine(TwoDConfig(lo, hi, 0.0, horizon=16), bud)
    assert e1.birth == e2.birth
    for _ in range(16):
        e1.step()
        e2.step()
        A = np.array([[g.lo, g.hi] for g in e1.active])
        B = np.array([[g.lo, g.hi] for g in e2.slots[0].elements])
        assert A.shape == B.shape
        assert np.max(np.abs(A - B)) <= 1e-10
    assert e2.falsifications == []
