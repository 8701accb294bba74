import math

import mpmath
import numpy as np
import pytest

from henonlab.critical import (UnstablePiece, UnstableW, allowed_generation, cardinality_cap,
                               critical_chain, find_tangency, log_cardinality_cap)
from henonlab.family import ConstantBudget, ParameterPoint
from henonlab.frames import accumulate

DELTA = math.exp(-5)


def test_zero_b_critical_point_is_the_origin():
    rec = critical_chain(ParameterPoint(1.98, 0.0), 2, DELTA)
    for r in rec:
        assert abs(r.location[0]) < 1e-12


@pytest.fixture(scope="module")
def chain():
    return critical_chain(ParameterPoint(1.99, 1e-6), 4, DELTA)


def test_critical_point_sits_near_the_fold(chain):
    z = chain[-1].location
    assert abs(z[0]) < 1e-5
    assert abs(z[1]) == pytest.approx(math.sqrt(1e-6) * math.sqrt(1 / 1.99), rel=1e-2)


def test_image_is_tangent_to_contracted_direction(chain):
    p = ParameterPoint(1.99, 1e-6)
    rec = chain[-1]
    W = UnstableW(p)
    t = W.tangent(rec.X)
    J = np.array([[-2 * p.a * rec.location[0], p.sqrt_b], [p.sqrt_b, 0.0]])
    v = J @ t
    e = accumulate(p, rec.value, rec.order).e(rec.order)
    sine = abs(v[0] * e[1] - v[1] * e[0]) / np.linalg.norm(v)
    assert sine < 1e-7


def test_orders_converge_fast(chain):
    gaps = [np.linalg.norm(a.location - b.location) for a, b in zip(chain, chain[1:])]
    assert all(g2 <= max(g1, 1e-15) for g1, g2 in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-12


def test_fold_is_quadratic(chain):
    assert 0 < chain[-1].tangency_curvature < math.inf


def test_cardinality_cap_matches_log_form():
    bud = ConstantBudget.make()
    for k in (1, 2, 3):
        c = cardinality_cap(k, bud, 1e-6)
        lg = log_cardinality_cap(k, bud, 1e-6)
        assert float(mpmath.log(c)) == pytest.approx(lg, rel=1e-9)


def test_generation_cap():
    bud = ConstantBudget.make()
    assert allowed_generation(1, bud, 1e-6, 1) == 1
    assert allowed_generation(5, bud, 0.0, 3) == 3
