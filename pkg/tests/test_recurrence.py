import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from henonlab.family import ParameterPoint
from henonlab.recurrence import (BindingOverrun, RecurrenceLedger, ReturnEvent, binding_from_distances,
                                 binding_period, check_EG, check_EG_1d, ledger_1d, star_check)


def brute_binding(dist, alpha):
    H = len(dist) - 1
    best = 0
    for K in range(H + 1):
        if all(dist[i] <= math.exp(-2 * alpha * i) + 10.0 ** (-K) for i in range(K + 1)):
            best = K
    return max(best, 1)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 2, allow_nan=False), min_size=2, max_size=40),
       st.sampled_from([0.02, 0.05]))
def test_binding_matches_linear_scan(dist, alpha):
    d = np.array(dist)
    assert binding_from_distances(d, alpha) == brute_binding(d, alpha)


def test_binding_overrun_when_strict():
    with pytest.raises(BindingOverrun):
        binding_period(np.zeros(10), np.zeros(10), 0.02, strict=True)


def test_binding_grows_with_depth():
    a = 1.99
    periods = []
    for d in (1e-3, 1e-5, 1e-7):
        xi = [d]
        ze = [0.0]
        for _ in range(200):
            xi.append(1 - a * xi[-1] ** 2)
            ze.append(1 - a * ze[-1] ** 2)
        periods.append(binding_period(np.array(xi[1:]), np.array(ze[1:]), 0.02))
    assert periods[0] < periods[1] < periods[2]


def test_critical_derivative_at_two_is_four_to_the_n():
    # phi^j(1) = -1 for j >= 1 at a = 2, so |D phi^j(phi(0))| = 4 * 4^(j-1) * ... in integers
    ok, m = check_EG_1d(np.array([2.0]), 25, 0.0)
    x, d = 1, 1
    for j in range(1, 26):
        d *= abs(4 * x)
        x = 1 - 2 * x * x
        assert m[j, 0] == pytest.approx(math.log(d), rel=1e-15)
        assert d == 4 ** j


def test_EG_margins_and_star():
    p = ParameterPoint(2.0, 0.0)
    res = check_EG(p, np.array([1.0, 0.0]), np.array([1.0, 0.0]), 10, math.log(4) - 1e-9)
    assert res.ok and res.first_failure is None
    led = RecurrenceLedger(5, [ReturnEvent(2, "free", math.exp(-3)), ReturnEvent(3, "bound", 1e-9)])
    assert led.star_sum == pytest.approx(3.0)
    assert star_check(led, 0.7) and not star_check(led, 0.5)


def test_pointwise_ledger_counts_only_free_returns():
    led = ledger_1d(1.999, 60, math.exp(-5), 0.02)
    free = led.free_returns()
    assert all(ev.kind == "free" for ev in free)
    for a, b in zip(free, free[1:]):
        assert b.time > a.time + a.period
