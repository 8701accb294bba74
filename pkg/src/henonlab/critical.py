"""Admissible curves, unstable-manifold pieces and finite-order critical points.

W is the local unstable manifold of the saddle P, computed as a graph
y = w(x) over X_DOMAIN by the backward-orbit (graph transform) relation

    x_{-i} = sqrt((1 + b x_{-i-1} - x_{-i+1}) / a),   w(x_0) = sqrt(b) x_{-1},

which converges geometrically because the backward branch contracts.
Generation-g material is Psi^g applied to the part of W left of x = 0
(Psi(W) minus W is exactly the image of that part), so every piece is
parametrised by the W-coordinate X and evaluated exactly, never
interpolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .family import ParameterPoint, ConstantBudget, fixed_point, jacobian
from .frames import accumulate, canonical_e, UndefinedFrame

X_DOMAIN = (-0.8, 0.98)
W_DEPTH = 12


class NonAdmissibleConfiguration(RuntimeError):
    """More than one tangency on a piece: a construction assumption failed."""


# ---------------------------------------------------------------------------
# admissible curves

@dataclass
class AdmissibleCurve:
    x: np.ndarray
    y: np.ndarray
    ident: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if len(self.x) >= 2 and not np.all(np.diff(self.x) > 0):
            raise ValueError("x-grid must be strictly increasing")

    @property
    def dy(self) -> np.ndarray:
        return np.gradient(self.y, self.x, edge_order=2)

    @property
    def d2y(self) -> np.ndarray:
        x, y = self.x, self.y
        h0 = x[1:-1] - x[:-2]
        h1 = x[2:] - x[1:-1]
        return 2 * (h0 * y[2:] - (h0 + h1) * y[1:-1] + h1 * y[:-2]) / (h0 * h1 * (h0 + h1))

    @property
    def length(self) -> float:
        return float(np.sum(np.hypot(np.diff(self.x), np.diff(self.y))))


@dataclass(frozen=True)
class AdmissibilityReport:
    ok: bool
    max_slope: float
    max_curvature: float


def admissible_check(c: AdmissibleCurve, bound: float = 0.1) -> AdmissibilityReport:
    if len(c.x) < 5:
        raise ValueError("need at least 5 samples")
    s = float(np.max(np.abs(c.dy[1:-1])))
    k = float(np.max(np.abs(c.d2y)))
    return AdmissibilityReport(s <= bound and k <= bound, s, k)


# ---------------------------------------------------------------------------
# W and its images

def _backward(p: ParameterPoint, X: float, px: float, depth: int = W_DEPTH):
    """x_{-1} and dx_{-1}/dX on the backward orbit of the W-point over X."""
    a, b = p.a, p.b
    xs = np.full(depth + 2, px)
    xs[0] = X
    ds = np.zeros(depth + 2)
    ds[0] = 1.0
    for _ in range(depth + 2):
        for i in range(1, depth + 1):
            u = (1.0 + b * xs[i + 1] - xs[i - 1]) / a
            xs[i] = math.sqrt(max(u, 0.0))
            ds[i] = (b * ds[i + 1] - ds[i - 1]) / (2 * a * xs[i]) if xs[i] > 0 else 0.0
    return xs[1], ds[1]


class UnstableW:
    """The graph w over X_DOMAIN, evaluated on demand."""

    def __init__(self, p: ParameterPoint, domain=X_DOMAIN):
        self.p = p
        self.domain = domain
        P = fixed_point(p)
        self.P = P
        J = jacobian(p, P)
        ev = np.linalg.eigvals(J)
        ev = sorted(np.abs(ev))
        if not (ev[1] > 1 > ev[0]):
            raise ValueError(f"P is not a saddle: |eigs| = {ev}")
        lo, hi = domain
        if math.sqrt((1 - lo) / p.a) > hi or math.sqrt((1 - hi) / p.a) < lo:
            raise ValueError("W domain is not closed under the backward branch")

    def point(self, X: float) -> np.ndarray:
        if self.p.b == 0:
            return np.array([X, 0.0])
        x1, _ = _backward(self.p, X, self.P[0])
        return np.array([X, self.p.sqrt_b * x1])

    def tangent(self, X: float) -> np.ndarray:
        if self.p.b == 0:
            return np.array([1.0, 0.0])
        _, d1 = _backward(self.p, X, self.P[0])
        return np.array([1.0, self.p.sqrt_b * d1])

    def curve(self, n: int = 401) -> AdmissibleCurve:
        xs = np.linspace(self.domain[0], self.domain[1], n)
        ys = np.array([self.point(x)[1] for x in xs])
        return AdmissibleCurve(xs, ys, "W")


@dataclass
class UnstablePiece:
    """Psi^g of W over X in [X_lo, X_hi]; gen 0 is W itself."""

    W: UnstableW
    generation: int
    X_lo: float
    X_hi: float
    ident: str = ""

    def point_and_tangent(self, X: float):
        z = self.W.point(X)
        t = self.W.tangent(X)
        for _ in range(self.generation):
            J = jacobian(self.W.p, z)
            t = J @ t
            z = np.array([1 - self.W.p.a * z[0] ** 2 + self.W.p.sqrt_b * z[1],
                          self.W.p.sqrt_b * z[0]])
        return z, t

    def point(self, X: float) -> np.ndarray:
        return self.point_and_tangent(X)[0]

    def xrange_in_strip(self, delta: float) -> Optional[tuple[float, float]]:
        """X-subinterval whose points have |x| <= delta (piece monotone in x)."""
        f = lambda X: self.point(X)[0]
        lo, hi = self.X_lo, self.X_hi
        flo, fhi = f(lo), f(hi)
        if max(flo, fhi) < -delta or min(flo, fhi) > delta:
            return None
        inc = fhi > flo

        def cross(level):
            a_, b_ = lo, hi
            for _ in range(200):
                m = 0.5 * (a_ + b_)
                if (f(m) < level) == inc:
                    a_ = m
                else:
                    b_ = m
                if b_ - a_ < 1e-16:
                    break
            return 0.5 * (a_ + b_)

        ends = []
        for level in (-delta, delta):
            if min(flo, fhi) < level < max(flo, fhi):
                ends.append(cross(level))
        cand = sorted([lo, hi] + ends)
        inside = [X for X in cand if abs(f(X)) <= delta * (1 + 1e-12)]
        if not inside:
            return None
        return min(inside), max(inside)

    def curve(self, n: int = 201) -> AdmissibleCurve:
        Xs = np.linspace(self.X_lo, self.X_hi, n)
        pts = np.array([self.point(X) for X in Xs])
        order = np.argsort(pts[:, 0])
        return AdmissibleCurve(pts[order, 0], pts[order, 1], self.ident)


def unstable_segment(p: ParameterPoint, iterates: int, n: int = 801,
                     min_len: float = 0.0) -> dict[int, list[UnstablePiece]]:
    """Generation -> maximal admissible pieces of Psi^g(W) minus Psi^(g-1)(W)."""
    W = UnstableW(p)
    out = {0: [UnstablePiece(W, 0, W.domain[0], W.domain[1], "g0")]}
    for g in range(1, iterates + 1):
        Xs = np.linspace(W.domain[0], 0.0, n)[:-1]
        pts, tans = zip(*(UnstablePiece(W, g, 0, 0).point_and_tangent(X) for X in Xs))
        pts = np.array(pts)
        tans = np.array(tans)
        slope = np.abs(tans[:, 1] / np.where(tans[:, 0] == 0, np.nan, tans[:, 0]))
        good = np.isfinite(slope) & (slope <= 0.1)
        # curvature check on the sampled graph
        curv = np.zeros(len(Xs))
        for i in range(1, len(Xs) - 1):
            x0, x1, x2 = pts[i - 1:i + 2, 0]
            y0, y1, y2 = pts[i - 1:i + 2, 1]
            if len({x0, x1, x2}) == 3:
                c = AdmissibleCurve(np.sort([x0, x1, x2]), np.array([y0, y1, y2])[np.argsort([x0, x1, x2])]).d2y
                curv[i] = abs(c[0])
            else:
                curv[i] = np.inf
        good &= curv <= 0.1
        pieces = []
        i = 0
        while i < len(Xs):
            if not good[i]:
                i += 1
                continue
            j = i
            while j + 1 < len(Xs) and good[j + 1] and np.sign(tans[j + 1, 0]) == np.sign(tans[i, 0]):
                j += 1
            if j > i:
                pc = UnstablePiece(W, g, Xs[i], Xs[j], f"g{g}p{len(pieces)}")
                L = float(np.sum(np.hypot(*np.diff(pts[i:j + 1], axis=0).T)))
                if L >= min_len:
                    pieces.append(pc)
            i = j + 1
        out[g] = pieces
    return out


# ---------------------------------------------------------------------------
# tangencies

@dataclass
class CriticalRecord:
    order: int
    generation: int
    location: np.ndarray
    value: np.ndarray
    host: str
    X: float
    ancestors: list = field(default_factory=list)
    tangency_curvature: float = float("nan")

    def to_json(self) -> dict:
        return {"order": self.order, "generation": self.generation,
                "location": [float(v) for v in self.location],
                "value": [float(v) for v in self.value], "host": self.host,
                "ancestry": [[o, [float(v) for v in loc]] for o, loc in self.ancestors],
                "tangency_curvature": self.tangency_curvature}


def mismatch(piece: UnstablePiece, X: float, k: int) -> float:
    """Signed sine of the angle from e^(k)(Psi(z)) to the tangent of Psi(piece)."""
    p = piece.W.p
    z, t = piece.point_and_tangent(X)
    tt = jacobian(p, z) @ t
    z1 = np.array([1 - p.a * z[0] ** 2 + p.sqrt_b * z[1], p.sqrt_b * z[0]])
    if k == 0:
        e = np.array([0.0, 1.0])
    else:
        e = canonical_e(accumulate(p, z1, k).e(k))
    n = math.hypot(tt[0], tt[1])
    return float((e[0] * tt[1] - e[1] * tt[0]) / n)


def _bisect(f, lo, hi, flo, tol):
    for _ in range(300):
        m = 0.5 * (lo + hi)
        if m == lo or m == hi:
            break
        fm = f(m)
        if fm == 0.0:
            return m
        if (fm < 0) == (flo < 0):
            lo, flo = m, fm
        else:
            hi = m
        if abs(fm) < tol and hi - lo < 1e-15:
            break
    return 0.5 * (lo + hi)


def find_tangency(piece: UnstablePiece, k: int, delta: float, samples: int = 33,
                  tol: float = 1e-12, check_quadratic: bool = True) -> Optional[CriticalRecord]:
    """Critical point of order k on the part of `piece` inside the strip."""
    p = piece.W.p
    rng = piece.xrange_in_strip(delta)
    if rng is None:
        return None
    lo, hi = rng
    Xs = np.linspace(lo, hi, samples)
    ms = np.array([mismatch(piece, X, k) for X in Xs])
    sg = np.sign(ms)
    changes = [i for i in range(samples - 1) if sg[i] != sg[i + 1] and sg[i] != 0 and sg[i + 1] != 0]
    zeros = [i for i in range(samples) if sg[i] == 0]
    if len(changes) + len(zeros) == 0:
        return None
    if len(changes) + len(zeros) > 1:
        raise NonAdmissibleConfiguration(f"{len(changes) + len(zeros)} tangencies on {piece.ident}")
    if zeros:
        Xc = float(Xs[zeros[0]])
    else:
        i = changes[0]
        f = lambda X: mismatch(piece, X, k)
        Xc = _bisect(f, Xs[i], Xs[i + 1], ms[i], tol)
        # one secant/Newton polish, kept only if it improves the residual
        h = max(abs(Xc) * 1e-9, 1e-18)
        f0 = f(Xc)
        d = (f(Xc + h) - f(Xc - h)) / (2 * h)
        if d != 0 and f0 != 0:
            Xn = Xc - f0 / d
            if Xs[i] <= Xn <= Xs[i + 1] and abs(f(Xn)) < abs(f0):
                Xc = Xn
    z = piece.point(Xc)
    z1 = np.array([1 - p.a * z[0] ** 2 + p.sqrt_b * z[1], p.sqrt_b * z[0]])
    curv = tangency_curvature(piece, Xc, k) if check_quadratic else float("nan")
    return CriticalRecord(k, piece.generation, z, z1, piece.ident, float(Xc), [], curv)


def tangency_curvature(piece: UnstablePiece, Xc: float, k: int, h: float = 1e-4) -> float:
    """Curvature of Psi(piece) at the tangency, measured against the leaf line.

    Coordinates: t along e^(k) at Psi(z), height across it.  For b = 0 the
    image is a vertical fold and the measure is taken in the x-direction.
    """
    p = piece.W.p
    z1 = piece.point(Xc)
    c = np.array([1 - p.a * z1[0] ** 2 + p.sqrt_b * z1[1], p.sqrt_b * z1[0]])
    e = np.array([0.0, 1.0]) if k == 0 else canonical_e(accumulate(p, c, k).e(k))
    nrm = np.array([e[1], -e[0]])
    ts, hs = [], []
    for s in (-2, -1, 0, 1, 2):
        z = piece.point(Xc + s * h)
        w = np.array([1 - p.a * z[0] ** 2 + p.sqrt_b * z[1], p.sqrt_b * z[0]]) - c
        ts.append(float(w @ e))
        hs.append(float(w @ nrm))
    ts, hs = np.array(ts), np.array(hs)
    if np.ptp(ts) == 0:
        return math.inf
    coef = np.polyfit(ts, hs, 2)
    return float(abs(2 * coef[0]))


def refine_critical(rec: CriticalRecord, piece: UnstablePiece, k_new: int, delta: float) -> CriticalRecord:
    if k_new != rec.order + 1:
        raise ValueError("refinement goes one order at a time")
    new = find_tangency(piece, k_new, delta)
    if new is None:
        raise NonAdmissibleConfiguration("refinement lost the tangency")
    new.ancestors = rec.ancestors + [(rec.order, rec.location.copy())]
    return new


def critical_chain(p: ParameterPoint, kmax: int, delta: float, generation: int = 0,
                   piece: Optional[UnstablePiece] = None) -> list[CriticalRecord]:
    """z^(0), z^(1), ..., z^(kmax) on one piece (default: W)."""
    if piece is None:
        W = UnstableW(p)
        piece = UnstablePiece(W, 0, *W.domain, ident="g0")
    rec = find_tangency(piece, 0, delta)
    out = [rec]
    for k in range(1, kmax + 1):
        rec = refine_critical(rec, piece, k, delta)
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# catalog and the cardinality cap

def log_cardinality_cap(k: int, budget: ConstantBudget, b: float) -> float:
    th = budget.theta_for(b)
    return th * k * math.log(5 / budget.rho) if k > 0 else 0.0


def cardinality_cap(k: int, budget: ConstantBudget, b: Optional[float] = None,
                    theta: Optional[float] = None) -> int:
    """floor((5/rho)^(theta k)), exact for huge values via mpmath."""
    import mpmath

    th = theta if theta is not None else budget.theta_for(b)
    e = th * k
    if e == 0:
        return 1
    if math.isinf(e):
        raise OverflowError("theta is infinite at b = 0")
    with mpmath.workdps(30 + int(e * math.log10(5 / budget.rho))):
        return int(mpmath.floor(mpmath.power(mpmath.mpf(5) / mpmath.mpf(budget.rho), mpmath.mpf(e))))


@dataclass
class CriticalCatalog:
    order: int
    records: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    def min_spacing(self) -> float:
        pts = [r.location for r in self.records]
        best = math.inf
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                best = min(best, float(np.linalg.norm(pts[i] - pts[j])))
        return best

    def check(self, budget: ConstantBudget, b: float) -> list[str]:
        out = []
        th = budget.theta_for(b)
        sep = 2 * budget.rho ** (math.floor(th * self.order)) if self.order else 2.0
        if self.order and self.min_spacing() < sep:
            out.append("spacing")
        if math.log(max(len(self.records), 1)) > log_cardinality_cap(self.order, budget, b) + 1e-12:
            out.append("cardinality")
        return out


def allowed_generation(k: int, budget: ConstantBudget, b: float, g_max: int) -> int:
    th = budget.theta_for(b)
    g = math.inf if math.isinf(th) else math.floor(th * k)
    return int(min(g, g_max))


def spawn_new_critical(p: ParameterPoint, catalog: CriticalCatalog, g_new: int,
                       budget: ConstantBudget, pieces: Optional[dict] = None,
                       proximity: Optional[float] = None) -> list[CriticalRecord]:
    """Tangency search on each generation-g_new piece crossing the strip."""
    k = catalog.order
    if pieces is None:
        pieces = unstable_segment(p, g_new)
    cand = pieces.get(g_new, [])
    th = budget.theta_for(p.b)
    radius = budget.rho ** math.floor(th * k) if k and not math.isinf(th) else 0.0
    if proximity is None:
        proximity = math.exp(-2 * budget.alpha)
    added = []
    for piece in sorted(cand, key=lambda pc: pc.point(0.5 * (pc.X_lo + pc.X_hi))[0]):
        if piece.curve(41).length < radius:
            continue
        rec = find_tangency(piece, k, budget.delta)
        if rec is None:
            continue
        if catalog.records:
            dmin = min(float(np.linalg.norm(rec.location - r.location)) for r in catalog.records)
            sep = 2 * radius
            if dmin < sep or dmin > proximity:
                catalog.dropped.append((rec, "spacing" if dmin < sep else "proximity"))
                continue
        catalog.records.append(rec)
        added.append(rec)
    return added
