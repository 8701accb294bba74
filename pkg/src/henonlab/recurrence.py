"""Bound neighbourhoods, returns, binding and the finite-time checks (EG, BD, (*)).

Conventions.  A return at time nu is a free iterate whose x-coordinate lies
in the critical strip.  Its binding point zeta is a critical point; the
binding period compares xi_i = Psi^i(Psi(z_nu)) with zeta_i = Psi^i(Psi(zeta))
and is the largest K with |xi_i - zeta_i| <= exp(-2 alpha i) + 10^-K for all
i <= K.  Iterates nu+1 .. nu+p are bound, nu+p+1 is free again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .family import ParameterPoint, ConstantBudget, orbit, jacobian
from .frames import accumulate


class BindingOverrun(RuntimeError):
    """The binding period would run past the available orbit."""


class CaptureFailure(RuntimeError):
    """No critical point satisfies the vertical capture bound."""


# ---------------------------------------------------------------------------
# bound neighbourhoods

@dataclass(frozen=True)
class BoundNeighborhoodSpec:
    center: np.ndarray        # z_i, i = 0..horizon
    order: int
    alpha: float

    @property
    def horizon(self) -> int:
        return len(self.center) - 1

    def radius(self, i: int) -> float:
        return math.exp(-2 * self.alpha * i) + 10.0 ** (-self.order)


def bound_member(p: ParameterPoint, spec: BoundNeighborhoodSpec, xi0, j: int) -> bool:
    if j > spec.horizon:
        raise ValueError("horizon exceeds the centre orbit")
    xs = orbit(p, xi0, j)
    for i in range(j + 1):
        if np.linalg.norm(xs[i] - spec.center[i]) > spec.radius(i):
            return False
    return True


def bound_neighborhood_samples(p: ParameterPoint, spec: BoundNeighborhoodSpec, j: int,
                               scale: float = 1.0) -> list:
    """Centre plus four extreme points of B^(j) along the axes (bisected radii)."""
    c = spec.center[0]
    out = [np.array(c, dtype=float)]
    for d in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        d = np.array(d, dtype=float)
        lo, hi = 0.0, spec.radius(0)
        for _ in range(60):
            m = 0.5 * (lo + hi)
            try:
                ok = bound_member(p, spec, c + m * d, j)
            except Exception:
                ok = False
            lo, hi = (m, hi) if ok else (lo, m)
        out.append(c + scale * lo * d)
    return out


# ---------------------------------------------------------------------------
# events and ledgers

@dataclass
class ReturnEvent:
    time: int
    kind: str                 # "free" or "bound"
    depth: float              # distance d to the binding point (x-offset)
    binding: Optional[str] = None
    period: int = 0
    generation: int = 0

    @property
    def log_inv_depth(self) -> float:
        return -math.log(self.depth) if self.depth > 0 else math.inf


@dataclass
class RecurrenceLedger:
    horizon: int
    events: list = field(default_factory=list)

    @property
    def star_sum(self) -> float:
        return float(sum(ev.log_inv_depth for ev in self.events if ev.kind == "free"))

    def star_sum_until(self, k: int) -> float:
        return float(sum(ev.log_inv_depth for ev in self.events
                         if ev.kind == "free" and ev.time <= k))

    def free_returns(self) -> list:
        return [ev for ev in self.events if ev.kind == "free"]

    def to_records(self) -> list:
        return [asdict(ev) for ev in self.events]


def star_check(ledger: RecurrenceLedger, alpha: float, k: Optional[int] = None) -> bool:
    if k is None:
        k = ledger.horizon
    return ledger.star_sum_until(k) <= alpha * k


# ---------------------------------------------------------------------------
# capture, distance, binding

@dataclass
class CaptureCertificate:
    generation: int
    vertical: float
    horizontal: float
    chain: list
    tangential: bool
    max_slope: float
    max_curvature: float


def _hermite_admissible(z, sz, w, sw, n: int = 21):
    """Cubic Hermite graph through z (slope sz) and w (slope sw)."""
    x0, x1 = float(z[0]), float(w[0])
    if x0 == x1:
        return False, math.inf, math.inf
    if x1 < x0:
        z, w, sz, sw = w, z, sw, sz
        x0, x1 = x1, x0
    h = x1 - x0
    y0, y1 = float(z[1]), float(w[1])
    t = np.linspace(0, 1, n)
    # derivative and second derivative of the Hermite cubic in x
    h00p, h10p, h01p, h11p = 6 * t * t - 6 * t, 3 * t * t - 4 * t + 1, -6 * t * t + 6 * t, 3 * t * t - 2 * t
    h00pp, h10pp, h01pp, h11pp = 12 * t - 6, 6 * t - 4, -12 * t + 6, 6 * t - 2
    d1 = (h00p * y0 + h10p * h * sz + h01p * y1 + h11p * h * sw) / h
    d2 = (h00pp * y0 + h10pp * h * sz + h01pp * y1 + h11pp * h * sw) / h ** 2
    ms, mc = float(np.max(np.abs(d1))), float(np.max(np.abs(d2)))
    return ms <= 0.1 and mc <= 0.1, ms, mc


def capture_binding_point(z_nu, nu: int, candidates: Sequence, budget: ConstantBudget, b: float,
                          w_slope: float = 0.0, host_slope=None, g_max: Optional[int] = None):
    """Pick the binding critical point for a free return at z_nu.

    candidates: objects with .generation and .location (CriticalRecord-like).
    Returns (record, CaptureCertificate).
    """
    th = budget.theta_for(b)
    gate = math.inf if math.isinf(th) else math.floor(th * nu)
    if g_max is not None:
        gate = min(gate, g_max)
    ok = []
    for rec in candidates:
        g = rec.generation
        if g > gate:
            continue
        v = abs(float(z_nu[1]) - float(rec.location[1]))
        bound = b ** (budget.capture_c * g) if b > 0 else (1.0 if g == 0 else 0.0)
        if v <= bound:
            ok.append((g, v, rec))
    if not ok:
        raise CaptureFailure(f"no candidate within the vertical bound at time {nu}")
    ok.sort(key=lambda t: (t[0], t[1]))
    # a non-sparse chain g_{i+1} <= 3 g_i through the accepted generations
    gens = sorted({g for g, _, _ in ok})
    chain = [gens[0]]
    for g in gens[1:]:
        if chain[-1] == 0 or g <= 3 * chain[-1]:
            chain.append(g)
    gbest = chain[-1]
    _, v, rec = min((t for t in ok if t[0] == gbest), key=lambda t: t[1])
    hs = host_slope(rec) if host_slope is not None else 0.0
    tang, ms, mc = _hermite_admissible(np.asarray(z_nu), w_slope, np.asarray(rec.location), hs)
    cert = CaptureCertificate(gbest, v, abs(float(z_nu[0]) - float(rec.location[0])), chain, tang, ms, mc)
    return rec, cert


def critical_distance(points_at_nu: Sequence, zeta) -> float:
    zeta = np.asarray(zeta, dtype=float)
    return float(min(np.linalg.norm(np.asarray(q) - zeta) for q in points_at_nu))


def _member_prefix(dist: np.ndarray, alpha: float, K: int) -> bool:
    i = np.arange(K + 1)
    return bool(np.all(dist[:K + 1] <= np.exp(-2 * alpha * i) + 10.0 ** (-K)))


def binding_period(xi_orbit, zeta_orbit, alpha: float, strict: bool = False) -> int:
    """Largest K with xi_0 in B^(K)(zeta_0); bisection over K (membership is monotone).

    xi_orbit, zeta_orbit: arrays of shape (H+1,) (x only, 1D) or (H+1, 2).
    Returns at least 1.  If membership holds over the whole available orbit
    the period is not determined: BindingOverrun if strict, else H.
    """
    xi = np.asarray(xi_orbit, dtype=float)
    ze = np.asarray(zeta_orbit, dtype=float)
    H = min(len(xi), len(ze)) - 1
    diff = xi[:H + 1] - ze[:H + 1]
    dist = np.abs(diff) if diff.ndim == 1 else np.hypot(diff[:, 0], diff[:, 1])
    if H < 1:
        raise BindingOverrun("no orbit to bind along")
    return binding_from_distances(dist, alpha, strict)


def binding_from_distances(dist: np.ndarray, alpha: float, strict: bool = False) -> int:
    """The binding rule applied to precomputed distances |xi_i - zeta_i|, i = 0..H."""
    H = len(dist) - 1
    if _member_prefix(dist, alpha, H):
        if strict:
            raise BindingOverrun(f"still bound after {H} iterates")
        return H
    lo, hi = 0, H          # member(lo) assumed true (K=0 uses slack 1), member(hi) false
    if not _member_prefix(dist, alpha, 0):
        return 1
    while hi - lo > 1:
        m = (lo + hi) // 2
        if _member_prefix(dist, alpha, m):
            lo = m
        else:
            hi = m
    return max(lo, 1)


# ---------------------------------------------------------------------------
# expansion and distortion checks

@dataclass(frozen=True)
class EGResult:
    ok: bool
    margins: np.ndarray

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margins))

    @property
    def first_failure(self) -> Optional[int]:
        bad = np.nonzero(self.margins < 0)[0]
        return int(bad[0]) if len(bad) else None


def slope(w) -> float:
    return math.inf if w[0] == 0 else abs(w[1] / w[0])


def check_EG(p: ParameterPoint, xi0, w0, k: int, kappa: float, points=None) -> EGResult:
    if slope(w0) > 0.1:
        raise ValueError("w0 must have slope <= 1/10")
    if points is None:
        points = orbit(p, xi0, k)
    w = np.asarray(w0, dtype=float)
    logn = math.log(np.linalg.norm(w))
    w = w / np.linalg.norm(w)
    m = np.empty(k + 1)
    m[0] = logn
    for j in range(k):
        w = jacobian(p, points[j]) @ w
        nw = float(np.linalg.norm(w))
        logn += math.log(nw) if nw > 0 else -math.inf
        w = w / nw if nw > 0 else w
        m[j + 1] = logn - kappa * (j + 1)
    return EGResult(bool(np.all(m >= 0)), m)


def check_EG_1d(a, k: int, kappa: float):
    """1D critical orbit: |D phi^j(phi(0))| >= exp(kappa j) for j <= k (vectorised in a)."""
    a = np.asarray(a, dtype=float)
    x = 1.0 - 0 * a
    logd = np.zeros_like(a)
    margins = [logd.copy()]
    with np.errstate(divide="ignore"):
        for j in range(1, k + 1):
            logd = logd + np.log(np.abs(2 * a * x))
            x = 1.0 - a * x * x
            margins.append(logd - kappa * j)
    m = np.array(margins)
    return np.all(m >= 0, axis=0), m


@dataclass(frozen=True)
class BDResult:
    ok: bool
    lhs_ratio: float
    rhs_ratio: float
    lhs_angle: float
    rhs_angle: float


def check_BD(p: ParameterPoint, xi0, eta0, j: int, alpha: float, D0: float) -> BDResult:
    hx = accumulate(p, xi0, j)
    he = accumulate(p, eta0, j)
    lhs1 = abs(hx.log_s1[j] - he.log_s1[j])
    dist = np.hypot(*(hx.points - he.points).T)
    w = np.exp(alpha * np.arange(j + 1))
    rhs1 = D0 * float(np.sum(dist[:j] * w[:j]))
    u, v = hx.f_image(j), he.f_image(j)
    lhs2 = math.asin(min(1.0, abs(u[0] * v[1] - u[1] * v[0])))
    rhs2 = D0 * float(dist[j] * w[j])
    return BDResult(lhs1 <= rhs1 + 1e-15 and lhs2 <= rhs2 + 1e-15, lhs1, rhs1, lhs2, rhs2)


@dataclass(frozen=True)
class GrowthResult:
    ok: bool
    log_growth: float
    log_target: float
    final_slope: float


def growth_after_binding(p: ParameterPoint, z_nu, w_nu, p_len: int, d: float,
                         kappa1: float, kappa2: float) -> GrowthResult:
    if p_len < 1:
        raise ValueError("binding period must be >= 1")
    pts = orbit(p, z_nu, p_len + 1)
    w = np.asarray(w_nu, dtype=float)
    w = w / np.linalg.norm(w)
    logn = 0.0
    for j in range(p_len + 1):
        w = jacobian(p, pts[j]) @ w
        nw = float(np.linalg.norm(w))
        logn += math.log(nw)
        w = w / nw
    target = max(-kappa1 * math.log(d), kappa2 * p_len)
    return GrowthResult(logn >= target, logn, target, slope(w))


# ---------------------------------------------------------------------------
# fixed-parameter ledgers

def ledger_1d(a: float, horizon: int, delta: float, alpha: float, extra: int = 80) -> RecurrenceLedger:
    """Returns of the 1D critical orbit z_n = phi^(n+1)(0), n = 1..horizon.

    Binding point is the critical point 0; the bound orbit is compared with
    the critical value orbit itself.
    """
    H = horizon + extra
    z = np.empty(H + 1)
    x = 1.0
    for i in range(H + 1):
        z[i] = x
        x = 1.0 - a * x * x
    led = RecurrenceLedger(horizon)
    n = 1
    bound_until = 0
    while n <= horizon:
        if abs(z[n]) <= delta:
            if n <= bound_until:
                led.events.append(ReturnEvent(n, "bound", abs(z[n]), "0", 0))
            else:
                p_len = binding_period(z[n + 1:], z, alpha)
                led.events.append(ReturnEvent(n, "free", abs(z[n]), "0", p_len))
                bound_until = n + p_len
        n += 1
    return led
