"""Hyperbolic coordinates: most contracted / most expanded directions.

For a non-conformal 2x2 matrix M the unit vectors v(t) = (sin t, cos t)
whose image norm is stationary satisfy

    tan 2t = -2 (M11 M12 + M21 M22) / (M11^2 + M21^2 - M12^2 - M22^2)

and the root t0 = atan2(-2B, A) / 2 is always the most contracted one
(the quadratic form |M v(t)|^2 = C - A cos(2t)/2 + B sin(2t) is minimal
there).  The expanded direction is the orthogonal one.

Products D Psi^k are accumulated incrementally in singular-value form
(left vectors, log singular values, angle of the expanded right vector),
applying the formula above to a well-scaled 2x2 matrix at each step.
Successive angles theta^(k) then come out with full relative precision
even when they are far below machine epsilon, and nothing overflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .family import ParameterPoint, jacobian, orbit, OrbitEscape

CONFORMAL_TOL = 1e-8


class UndefinedFrame(ValueError):
    """The product is (numerically) conformal; directions are meaningless."""


def _rot90(u):
    return np.array([-u[1], u[0]])


def canonical_e(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v[1] < 0 or (v[1] == 0 and v[0] < 0):
        v = -v
    return v + 0.0


def canonical_f(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v[0] < 0 or (v[0] == 0 and v[1] < 0):
        v = -v
    return v + 0.0


def contracted_angle(M) -> float:
    """t0 with v(t0) = (sin t0, cos t0) the most contracted unit vector."""
    A = M[0][0] ** 2 + M[1][0] ** 2 - M[0][1] ** 2 - M[1][1] ** 2
    B = M[0][0] * M[0][1] + M[1][0] * M[1][1]
    return 0.5 * math.atan2(-2.0 * B, A)


@dataclass(frozen=True)
class FrameDirections:
    e: np.ndarray
    f: np.ndarray
    contraction: float
    expansion: float


def frame_from_product(M) -> FrameDirections:
    M = np.asarray(M, dtype=float)
    t = contracted_angle(M)
    e = np.array([math.sin(t), math.cos(t)])
    f = np.array([math.cos(t), -math.sin(t)])
    expansion = float(np.linalg.norm(M @ f))
    det = abs(M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0])
    if expansion == 0.0:
        raise UndefinedFrame("zero matrix")
    contraction = det / expansion
    if contraction > 0 and expansion / contraction <= 1 + CONFORMAL_TOL:
        raise UndefinedFrame(f"near-conformal product (ratio {expansion / contraction})")
    return FrameDirections(canonical_e(e), canonical_f(f), contraction, expansion)


@dataclass(frozen=True)
class HyperbolicFrame:
    order: int
    base: tuple
    e: np.ndarray
    f: np.ndarray
    contraction: float
    expansion: float
    log_contraction: float
    log_expansion: float


@dataclass
class FrameHistory:
    """Singular-value form of D Psi^j at z0 for j = 0..k.

    psi[j] is the angle of f^(j) from the horizontal (e^(j) is f^(j) turned
    by +90 degrees), step[j] the signed rotation from e^(j) to e^(j+1).
    """

    points: np.ndarray
    log_s1: np.ndarray
    log_s2: np.ndarray
    psi: np.ndarray
    step: np.ndarray
    u1: np.ndarray

    @property
    def order(self) -> int:
        return len(self.log_s1) - 1

    def e(self, k: int) -> np.ndarray:
        p = self.psi[k]
        return np.array([-math.sin(p), math.cos(p)])

    def f(self, k: int) -> np.ndarray:
        p = self.psi[k]
        return np.array([math.cos(p), math.sin(p)])

    def frame(self, k: int) -> HyperbolicFrame:
        if k < 1 or k > self.order:
            raise ValueError("order out of range")
        l1, l2 = self.log_s1[k], self.log_s2[k]
        if l1 - l2 <= math.log1p(CONFORMAL_TOL):
            raise UndefinedFrame(f"near-conformal D Psi^{k}")
        return HyperbolicFrame(k, tuple(self.points[0]), canonical_e(self.e(k)),
                               canonical_f(self.f(k)), math.exp(l2), math.exp(l1), l2, l1)

    def f_image(self, k: int) -> np.ndarray:
        """Unit vector along D Psi^k f^(k) (major axis of the image ellipse)."""
        return self.u1[k]

    def theta(self, k: int) -> float:
        """Unsigned angle between e^(k) and e^(k+1)."""
        if k < 1 or k + 1 > self.order:
            raise ValueError("need frames of order k and k+1")
        for j in (k, k + 1):
            if self.log_s1[j] - self.log_s2[j] <= math.log1p(CONFORMAL_TOL):
                raise UndefinedFrame(f"near-conformal D Psi^{j}")
        return abs(self.step[k])

    def image_norms(self, k: int, j: int) -> tuple[float, float]:
        """(|D Psi^j f^(k)|, |D Psi^j e^(k)|) computed in the order-j singular basis."""
        if not 0 <= j <= k <= self.order:
            raise ValueError("need 0 <= j <= k <= order")
        if j == 0:
            return 1.0, 1.0
        # e^(k) is e^(j) rotated by the accumulated steps j..k-1
        rot = float(np.sum(self.step[j:k]))
        c, s = math.cos(rot), math.sin(rot)
        s1, s2 = math.exp(self.log_s1[j]), math.exp(self.log_s2[j])
        nf = math.hypot(s1 * c, s2 * s)
        ne = math.hypot(s2 * c, s1 * s)
        return nf, ne


def accumulate(p: ParameterPoint, z0, k: int, points: Optional[np.ndarray] = None) -> FrameHistory:
    if k < 0:
        raise ValueError("k must be non-negative")
    if points is None:
        points = orbit(p, z0, k)
    log_s1 = np.zeros(k + 1)
    log_s2 = np.zeros(k + 1)
    psi = np.zeros(k + 1)
    step = np.zeros(k + 1)
    us = np.zeros((k + 1, 2))
    u1 = np.array([1.0, 0.0])
    us[0] = u1
    sign = 1.0
    s = 1.0
    logdetJ = math.log(p.b) if p.b > 0 else -math.inf
    for j in range(k):
        J = jacobian(p, points[j])
        u2 = sign * _rot90(u1)
        n1 = J @ u1
        n2 = s * (J @ u2)
        N = np.column_stack([n1, n2])
        t = contracted_angle(N)
        step[j] = t
        r1 = (math.cos(t), -math.sin(t))
        w = r1[0] * n1 + r1[1] * n2
        nw = math.hypot(w[0], w[1])
        if nw == 0.0:
            raise UndefinedFrame(f"degenerate product at step {j + 1}")
        u1 = w / nw
        us[j + 1] = u1
        log_s1[j + 1] = log_s1[j] + math.log(nw)
        log_s2[j + 1] = log_s1[j] + log_s2[j] + logdetJ - log_s1[j + 1]
        psi[j + 1] = psi[j] - t
        sign = -sign
        d = log_s2[j + 1] - log_s1[j + 1]
        s = math.exp(d) if d > -745 else 0.0
    return FrameHistory(points, log_s1, log_s2, psi, step, us)


def jac_product(p: ParameterPoint, z0, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = orbit(p, z0, k - 1)
    M = np.eye(2)
    for j in range(k):
        M = jacobian(p, pts[j]) @ M
    return M


def jac_product_scaled(p: ParameterPoint, z0, k: int) -> tuple[np.ndarray, float]:
    """(M / scale, log scale) with the stored matrix kept at max-entry 1."""
    pts = orbit(p, z0, k - 1)
    M = np.eye(2)
    logscale = 0.0
    for j in range(k):
        M = jacobian(p, pts[j]) @ M
        m = float(np.max(np.abs(M)))
        if m > 0:
            M /= m
            logscale += math.log(m)
    return M, logscale


def frame_at(p: ParameterPoint, z0, k: int) -> HyperbolicFrame:
    return accumulate(p, z0, k).frame(k)


def successive_angle(p: ParameterPoint, z0, k: int) -> float:
    return accumulate(p, z0, k + 1).theta(k)


def successive_angles(p: ParameterPoint, z0, kmax: int) -> np.ndarray:
    h = accumulate(p, z0, kmax + 1)
    return np.array([h.theta(k) for k in range(1, kmax + 1)])


def image_frame_norms(p: ParameterPoint, z0, k: int, j: int) -> tuple[float, float]:
    return accumulate(p, z0, k).image_norms(k, j)


def e_direction(p: ParameterPoint, z0, k: int) -> np.ndarray:
    """Canonical e^(k) at z0 (no conformality check beyond degeneracy)."""
    h = accumulate(p, z0, k)
    return canonical_e(h.e(k))


# ---------------------------------------------------------------------------
# stable leaves

@dataclass
class StableLeafSegment:
    order: int
    points: np.ndarray
    residuals: np.ndarray
    partial: bool = False
    step: float = 0.0


def _field(p, k, ref):
    def g(z):
        v = e_direction(p, z, k)
        return v if float(np.dot(v, ref)) >= 0 else -v
    return g


def integrate_stable_leaf(p: ParameterPoint, z0, k: int, radius: float,
                          step: Optional[float] = None) -> StableLeafSegment:
    """Follow the e^(k) field from z0 both ways to arc length `radius` (RK4)."""
    if step is None:
        step = 1e-4 * radius
    nsteps = int(math.ceil(radius / step - 1e-9))
    h = radius / nsteps
    z0 = np.asarray(z0, dtype=float)
    e0 = e_direction(p, z0, k)
    branches = []
    partial = False
    for sgn in (1.0, -1.0):
        ref = sgn * e0
        pts = [z0.copy()]
        z = z0.copy()
        try:
            for _ in range(nsteps):
                g = _field(p, k, ref)
                k1 = g(z)
                k2 = g(z + 0.5 * h * k1)
                k3 = g(z + 0.5 * h * k2)
                k4 = g(z + h * k3)
                d = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
                z = z + h * d
                ref = d
                pts.append(z.copy())
        except (UndefinedFrame, OrbitEscape):
            partial = True
        branches.append(pts)
    poly = np.array(branches[1][::-1] + branches[0][1:])
    res = leaf_residuals(p, k, poly)
    return StableLeafSegment(k, poly, res, partial, h)


def leaf_residuals(p: ParameterPoint, k: int, poly: np.ndarray) -> np.ndarray:
    """Angle between each chord of the polyline and e^(k) at its midpoint."""
    out = np.empty(len(poly) - 1)
    for i in range(len(poly) - 1):
        d = poly[i + 1] - poly[i]
        d = d / np.linalg.norm(d)
        e = e_direction(p, 0.5 * (poly[i] + poly[i + 1]), k)
        out[i] = math.asin(min(1.0, abs(d[0] * e[1] - d[1] * e[0])))
    return out
