import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from henonlab.family import ConstantBudget
from henonlab.onedim import (AtCriticalPoint, ExactEngine1D, SampledEngine1D, StartupError,
                             StripGeometry, batch_bisect, birth_time, param_phase_map,
                             param_phase_map_with_derivative, phase_partition_index,
                             refine_and_exclude_1d, verify_retained_1d)

DELTA = math.exp(-5)


def brute_index(x, delta, r_hi=40):
    """Independent bin lookup: list every bin of every ring and search it."""
    if abs(x) > delta:
        return None
    for r in range(5, r_hi):
        inner, outer = math.exp(-r - 1), math.exp(-r)
        if inner < abs(x) <= outer:
            edges = np.linspace(inner, outer, r * r + 1)
            for m in range(1, r * r + 1):
                if edges[m - 1] < abs(x) <= edges[m] + 1e-18:
                    return (r if x > 0 else -r), m
    raise AssertionError("not found")


def test_partition_examples():
    assert phase_partition_index(0.004, DELTA) == (5, 9)
    assert phase_partition_index(-math.exp(-7), DELTA) == (-7, 49)
    assert phase_partition_index(0.5, DELTA) is None
    with pytest.raises(AtCriticalPoint):
        phase_partition_index(0.0, DELTA)


@settings(max_examples=500, deadline=None)
@given(st.floats(-DELTA, DELTA).filter(lambda x: abs(x) > 1e-12))
def test_partition_matches_enumeration(x):
    assert phase_partition_index(x, DELTA) == brute_index(x, DELTA)


def test_geometry_pieces_agree_with_labels():
    g = StripGeometry(DELTA, 5, 8)
    lo, hi = -0.003, 0.0071
    inner, labs = g.pieces(lo, hi)
    cuts = np.concatenate([[lo], inner, [hi]])
    assert len(labs) == len(cuts) - 1
    for (a, b), lab in zip(zip(cuts, cuts[1:]), labs):
        assert g.label(0.5 * (a + b)) == lab
    assert labs[-1] == "R"


def test_phase_map_derivative_by_finite_differences():
    a = np.array([1.99, 1.995])
    x, d = param_phase_map_with_derivative(a, 6)
    h = 1e-7
    fd = (param_phase_map(a + h, 6) - param_phase_map(a - h, 6)) / (2 * h)
    np.testing.assert_allclose(d, fd, rtol=1e-5)


def test_batch_bisect_solves_monotone_equations():
    f = lambda a: a ** 3
    lo = np.array([0.0, -2.0])
    hi = np.array([2.0, 0.0])
    t = np.array([1.0, -0.125])
    r = batch_bisect(f, lo, hi, t, np.array([True, True]), 1e-14)
    np.testing.assert_allclose(r, [1.0, -0.5], atol=1e-13)


def test_birth_time_and_startup_failure():
    assert birth_time(2 - 2 ** -27, 2.0, 15, DELTA) == 10
    with pytest.raises(StartupError):
        birth_time(0.999, 1.0, 15, DELTA)


def test_exact_engine_keeps_a_clean_partition():
    bud = ConstantBudget.make()
    eng = ExactEngine1D(2 - 2 ** -27, 2.0, bud, rule="essential")
    for _ in range(18):
        refine_and_exclude_1d(eng)
    assert eng.check_partition() == []
    assert eng.ledger.check() == []
    assert len(eng.active) > 1
    for g in eng.active:
        x0, x1 = param_phase_map(np.array([g.lo, g.hi]), eng.time)
        assert math.isfinite(x0) and math.isfinite(x1)


def test_sampled_engine_accounting():
    bud = ConstantBudget.make(alpha=0.05)
    eng = SampledEngine1D(1.99, 2.0, bud, samples=2 ** 10)
    led = eng.run(30)
    assert led.check() == []
    assert led.rows[-1]["retained_measure"] == pytest.approx(eng.alive.sum() * 0.01 / 2 ** 10)
    # nothing is excluded before N
    assert np.all((eng.excluded_at == 0) | (eng.excluded_at >= bud.N))


def test_verify_retained_at_two():
    assert verify_retained_1d(2.0, 30, 0.1)
    assert not verify_retained_1d(1.0, 10, 0.1)
