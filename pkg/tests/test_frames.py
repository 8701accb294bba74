import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from henonlab.family import ParameterPoint, jacobian, orbit
from henonlab.frames import (UndefinedFrame, accumulate, contracted_angle, frame_from_product,
                             integrate_stable_leaf, jac_product)


def _angle(u, v):
    c = abs(float(np.dot(u, v))) / (np.linalg.norm(u) * np.linalg.norm(v))
    s = abs(u[0] * v[1] - u[1] * v[0]) / (np.linalg.norm(u) * np.linalg.norm(v))
    return math.atan2(s, c)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=4, max_size=4))
def test_contracted_direction_matches_svd(entries):
    M = np.array(entries).reshape(2, 2)
    s = np.linalg.svd(M, compute_uv=False)
    if s[1] == 0 or s[0] / max(s[1], 1e-300) < 1.01 or s[0] < 1e-3:
        return
    _, _, Vt = np.linalg.svd(M)
    t = contracted_angle(M)
    e = np.array([math.sin(t), math.cos(t)])
    assert _angle(e, Vt[1]) < 1e-8


def test_conformal_product_is_rejected():
    with pytest.raises(UndefinedFrame):
        frame_from_product(np.array([[2.0, 0.0], [0.0, 2.0]]))


def test_accumulated_frame_matches_direct_svd():
    p = ParameterPoint(1.9, 1e-3)
    z0 = np.array([0.3, 0.01])
    h = accumulate(p, z0, 6)
    for k in range(1, 7):
        M = jac_product(p, z0, k)
        U, s, Vt = np.linalg.svd(M)
        assert _angle(h.e(k), Vt[1]) < 1e-9
        assert h.log_s1[k] == pytest.approx(math.log(s[0]), rel=1e-12)
        assert _angle(h.f_image(k), U[:, 0]) < 1e-9


def test_image_norms_against_direct_products():
    p = ParameterPoint(1.9, 1e-3)
    z0 = np.array([0.3, 0.01])
    h = accumulate(p, z0, 5)
    f5, e5 = h.f(5), h.e(5)
    for j in range(0, 6):
        M = np.eye(2) if j == 0 else jac_product(p, z0, j)
        nf, ne = h.image_norms(5, j)
        assert nf == pytest.approx(np.linalg.norm(M @ f5), rel=1e-9)
        assert ne == pytest.approx(np.linalg.norm(M @ e5), rel=1e-6, abs=1e-15)


def test_successive_angles_scale_like_b():
    z0 = (1.0, 0.0)
    for b in (1e-4, 1e-6):
        h = accumulate(ParameterPoint(1.95, b), z0, 6)
        th = np.array([h.theta(k) for k in range(1, 6)])
        slope = np.polyfit(np.arange(1, 6), np.log(th), 1)[0]
        assert slope <= math.log(b) + 0.5


def test_stable_leaf_follows_the_field():
    seg = integrate_stable_leaf(ParameterPoint(1.9, 1e-4), (0.3, 0.0), 3, 1e-3)
    assert not seg.partial
    assert np.max(seg.residuals) < 1e-6
