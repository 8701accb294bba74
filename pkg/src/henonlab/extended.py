"""The extended parameter space for the planar family.

Every critical point [z] that is followed gets a slot: a parameter range
Omega_[z], a good set and a partition of it into parameter intervals.  The
image of an interval gamma at time n is the curve a -> Psi_a^(n+1)(zeta(a)),
where zeta(a) is the continuation of the slot's critical point.  Returns of
this curve to the critical strip are measured against the binding point
captured at the probe parameter of gamma, chopped with the same strip
partition as in one dimension, and elements whose sum of essential return
depths exceeds tau n are excluded.  The global good set is the complement
of all exclusions of all slots.

With b = 0 the only critical point is (0, 0), every image curve is the
quadratic parameter map, and the whole construction collapses onto the
one-dimensional scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import chebyshev as C

from .family import ConstantBudget, ParameterPoint
from .critical import (critical_chain, find_tangency, unstable_segment, cardinality_cap,
                       log_cardinality_cap, allowed_generation, NonAdmissibleConfiguration)
from .recurrence import (capture_binding_point, binding_from_distances, CaptureFailure,
                         check_EG, RecurrenceLedger, ReturnEvent)
from .onedim import StripGeometry, StartupError, batch_bisect

SCHEMA_VERSION = 1


class Falsification(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# interval unions

class IntervalSet:
    """Finite disjoint union of closed intervals, kept sorted and merged."""

    def __init__(self, intervals=()):
        iv = sorted((float(a), float(b)) for a, b in intervals if b > a)
        out = []
        for a, b in iv:
            if out and a <= out[-1][1]:
                out[-1] = (out[-1][0], max(out[-1][1], b))
            else:
                out.append((a, b))
        self.iv = out

    def measure(self) -> float:
        return float(sum(b - a for a, b in self.iv))

    def minus(self, other: "IntervalSet") -> "IntervalSet":
        out = []
        j = 0
        rem = other.iv
        for a, b in self.iv:
            cur = a
            while j < len(rem) and rem[j][1] <= cur:
                j += 1
            k = j
            while k < len(rem) and rem[k][0] < b:
                c, d = rem[k]
                if c > cur:
                    out.append((cur, c))
                cur = max(cur, d)
                if d >= b:
                    break
                k += 1
            if cur < b:
                out.append((cur, b))
        return IntervalSet(out)

    def union(self, other: "IntervalSet") -> "IntervalSet":
        return IntervalSet(self.iv + other.iv)

    def lowest_in(self, lo: float, hi: float) -> Optional[float]:
        """Lowest point of [lo, hi] that lies in the set (None if the intersection is empty)."""
        i = int(np.searchsorted([b for _, b in self.iv], lo, side="left")) if self.iv else 0
        while i < len(self.iv):
            a, b = self.iv[i]
            if a >= hi:
                return None
            if b > lo:
                return max(a, lo)
            i += 1
        return None

    def __eq__(self, other) -> bool:
        return isinstance(other, IntervalSet) and self.iv == other.iv

    def __repr__(self):
        return f"IntervalSet({self.iv})"


# ---------------------------------------------------------------------------
# continuation of critical points in the parameter

@dataclass
class CriticalFamily:
    """a -> zeta(a) over [lo, hi] as Chebyshev fits in each coordinate."""

    ident: str
    generation: int
    order: int
    lo: float
    hi: float
    b: float
    cx: np.ndarray = field(default_factory=lambda: np.zeros(1))
    cy: np.ndarray = field(default_factory=lambda: np.zeros(1))
    residual: float = 0.0

    def _t(self, a):
        a = np.asarray(a, dtype=float)
        if self.hi == self.lo:
            return np.zeros_like(a)
        return (2.0 * a - (self.lo + self.hi)) / (self.hi - self.lo)

    def at(self, a) -> tuple[np.ndarray, np.ndarray]:
        t = self._t(a)
        return C.chebval(t, self.cx) + 0.0 * t, C.chebval(t, self.cy) + 0.0 * t

    def deriv(self, a) -> tuple[np.ndarray, np.ndarray]:
        t = self._t(a)
        s = 2.0 / (self.hi - self.lo) if self.hi > self.lo else 0.0
        dx = C.chebval(t, C.chebder(self.cx)) * s if len(self.cx) > 1 else 0.0 * t
        dy = C.chebval(t, C.chebder(self.cy)) * s if len(self.cy) > 1 else 0.0 * t
        return dx + 0.0 * t, dy + 0.0 * t

    def max_speed(self, samples: int = 65) -> float:
        a = np.linspace(self.lo, self.hi, samples)
        dx, dy = self.deriv(a)
        return float(np.max(np.hypot(dx, dy)))

    def covers(self, a: float) -> bool:
        return self.lo <= a <= self.hi

    def point(self, a: float) -> np.ndarray:
        x, y = self.at(a)
        return np.array([float(x), float(y)])


def direct_critical(a: float, b: float, generation: int, order: int, delta: float) -> np.ndarray:
    """Critical point of the given generation and order at one parameter, from scratch."""
    p = ParameterPoint(a, b)
    if generation == 0:
        return critical_chain(p, order, delta)[-1].location
    pieces = unstable_segment(p, generation).get(generation, [])
    found = []
    for pc in pieces:
        rec = find_tangency(pc, order, delta)
        if rec is not None:
            found.append(rec.location)
    if len(found) != 1:
        raise NonAdmissibleConfiguration(f"{len(found)} generation-{generation} tangencies at a={a}")
    return found[0]


def continue_critical(lo: float, hi: float, b: float, generation: int, order: int,
                      delta: float, nodes: int = 5, ident: Optional[str] = None) -> CriticalFamily:
    ident = ident or f"g{generation}"
    if b == 0:
        if generation != 0:
            raise NonAdmissibleConfiguration("no higher-generation critical points at b = 0")
        return CriticalFamily(ident, 0, order, lo, hi, 0.0, np.zeros(1), np.zeros(1), 0.0)
    k = np.arange(nodes)
    t = np.cos(np.pi * (k + 0.5) / nodes)
    a = 0.5 * (lo + hi) + 0.5 * (hi - lo) * t
    pts = np.array([direct_critical(float(x), b, generation, order, delta) for x in a])
    cx = C.chebfit(t, pts[:, 0], nodes - 1)
    cy = C.chebfit(t, pts[:, 1], nodes - 1)
    fam = CriticalFamily(ident, generation, order, lo, hi, b, cx, cy)
    # independent check between nodes
    am = 0.5 * (lo + hi) + 0.25 * (hi - lo)
    z = direct_critical(am, b, generation, order, delta)
    fam.residual = float(np.linalg.norm(fam.point(am) - z))
    return fam


# ---------------------------------------------------------------------------
# image curves

def image_curve(fam: CriticalFamily, a, n: int, with_derivative: bool = False):
    """Psi_a^(n+1)(zeta(a)) for an array of a (x, y and optionally d/da)."""
    a = np.asarray(a, dtype=float)
    s = math.sqrt(fam.b)
    x, y = fam.at(a)
    if with_derivative:
        dx, dy = fam.deriv(a)
    for _ in range(n + 1):
        if with_derivative:
            dx, dy = -2.0 * a * x * dx + s * dy - x * x, s * dx
        x, y = 1.0 - a * x * x + s * y, s * x
    if with_derivative:
        return x, y, dx, dy
    return x, y


def orbit_block(a: np.ndarray, x: np.ndarray, y: np.ndarray, steps: int, s: float):
    """Rows 0..steps of the orbits of (x, y) (vectorised in the parameter)."""
    X = np.empty((steps + 1, len(a)))
    Y = np.empty((steps + 1, len(a)))
    for i in range(steps + 1):
        X[i], Y[i] = x, y
        x, y = 1.0 - a * x * x + s * y, s * x
    return X, Y


# ---------------------------------------------------------------------------
# elements and slots

@dataclass
class ParamInterval2D:
    lo: float
    hi: float
    slot: int
    ident: str
    parent: Optional[str] = None
    itinerary: list = field(default_factory=list)     # (time, kind, r, m)
    escapes: list = field(default_factory=list)       # (time, lo, hi, E, R)
    E: int = 0
    R: int = 0
    bound_until: int = 0
    cls: str = "init"
    status: str = "active"
    cause: str = ""
    binding: Optional[str] = None
    p_len: int = 0

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def record(self, n: int, full: bool = False) -> dict:
        last = self.itinerary[-1] if self.itinerary and self.itinerary[-1][0] == n else None
        if self.status != "active" and not full:
            return {"schema_version": SCHEMA_VERSION, "type": "element", "n": n, "slot": self.slot,
                    "id": self.ident, "parent": self.parent, "lo": self.lo, "hi": self.hi,
                    "class": self.cls, "r": last[2] if last else 0, "m": last[3] if last else 0,
                    "E": self.E, "R": self.R, "status": self.status, "cause": self.cause}
        return {"schema_version": SCHEMA_VERSION, "type": "element", "n": n, "slot": self.slot,
                "id": self.ident, "parent": self.parent, "lo": self.lo, "hi": self.hi,
                "class": self.cls, "r": last[2] if last else 0, "m": last[3] if last else 0,
                "E": self.E, "R": self.R, "p": self.p_len, "binding": self.binding,
                "status": self.status, "cause": self.cause,
                "escapes": [list(e) for e in self.escapes] if full else len(self.escapes)}


@dataclass
class ExtendedSlot:
    ident: int
    family: CriticalFamily
    omega: tuple
    birth: int
    certificate: dict
    elements: list = field(default_factory=list)
    counter: int = 0

    def good(self) -> IntervalSet:
        return IntervalSet((g.lo, g.hi) for g in self.elements)

    def new_id(self) -> str:
        self.counter += 1
        return f"{self.ident}.{self.counter}"


def validate_itinerary(g: ParamInterval2D, r_delta: int) -> list[str]:
    """Grammar: starts with the birth escape; times increase; depths consistent."""
    out = []
    it = g.itinerary
    if not it or it[0][1] != "escape":
        out.append("missing birth escape")
    times = [t for t, *_ in it]
    if any(b <= a for a, b in zip(times, times[1:])):
        out.append("times not increasing")
    for t, kind, r, m in it:
        if kind == "escape" and r != 0:
            out.append(f"escape with depth at {t}")
        if kind in ("essential", "inessential") and abs(r) < r_delta:
            out.append(f"shallow return at {t}")
        if kind == "essential" and not (1 <= m <= r * r):
            out.append(f"bad subindex at {t}")
    if not g.E <= g.R:
        out.append("E > R")
    return out


def verify_star_from_depths(g: ParamInterval2D, n: int, alpha: float, C_depth: float) -> tuple[bool, dict]:
    """R <= C_depth E and 2 R <= alpha n (the sum of log 1/d is below 2 R)."""
    ok_ratio = g.R <= C_depth * g.E + 1e-12
    ok_sum = 2 * g.R <= alpha * n + 1e-12
    return ok_ratio and ok_sum, {"R": g.R, "E": g.E, "ratio_margin": C_depth * g.E - g.R,
                                 "sum_margin": alpha * n - 2 * g.R}


def minimal_cover(intervals: list) -> list:
    """Indices of a subfamily with the same union in which no point is covered more than twice.

    Greedy: among intervals starting inside the current covered prefix, keep
    the one reaching furthest.  Ties keep the lower index.
    """
    order = sorted(range(len(intervals)), key=lambda i: (intervals[i][0], -intervals[i][1], i))
    chosen = []
    i = 0
    while i < len(order):
        lo, hi = intervals[order[i]]
        best = order[i]
        reach = hi
        j = i + 1
        # extend a connected run
        chosen.append(best)
        while True:
            cand = None
            while j < len(order) and intervals[order[j]][0] <= reach:
                k = order[j]
                if intervals[k][1] > reach and (cand is None or intervals[k][1] > intervals[cand][1]):
                    cand = k
                j += 1
            if cand is None:
                break
            chosen.append(cand)
            reach = intervals[cand][1]
        i = j
    return sorted(chosen)


def max_multiplicity(intervals: list) -> int:
    ev = []
    for a, b in intervals:
        ev.append((a, 1))
        ev.append((b, -1))
    ev.sort(key=lambda t: (t[0], t[1]))
    cur = best = 0
    for _, d in ev:
        cur += d
        best = max(best, cur)
    return best


# ---------------------------------------------------------------------------
# the engine

@dataclass
class TwoDConfig:
    lo: float
    hi: float
    b: float
    horizon: int = 24
    r_max: Optional[int] = None
    g_max: int = 1
    crit_order: int = 6
    cheb_nodes: int = 5
    tol: float = 1e-14
    binding_extra: int = 120
    slow_samples: int = 2
    doomed_samples: int = 8
    eg_samples: int = 16


class ExtendedEngine:
    def __init__(self, cfg: TwoDConfig, budget: ConstantBudget, log: Optional[Callable] = None):
        self.cfg = cfg
        self.budget = budget
        self.b = cfg.b
        self.s = math.sqrt(cfg.b)
        self.N = budget.N
        self.tau = budget.tau
        self.r_max = cfg.r_max if cfg.r_max is not None else 2 * budget.r_delta
        self.records: list = []
        self.falsifications: list = []
        self.measurements: dict = {"binding": [], "slow_variation": [], "margin_gamma": [],
                                   "kappa0": [], "distortion": [], "capture": []}
        self.log = log or (lambda rec: None)
        self.time = 0
        self.families: dict = {}
        self.slots: list = []
        self.omega = (cfg.lo, cfg.hi)
        self.gamma = IntervalSet([(cfg.lo, cfg.hi)])
        self.excluded_total = 0.0
        self.step_rows: list = []
        self.init_extended()

    # -- start ---------------------------------------------------------------
    def family(self, generation: int) -> CriticalFamily:
        key = f"g{generation}"
        if key not in self.families:
            self.families[key] = continue_critical(self.cfg.lo, self.cfg.hi, self.b, generation,
                                                   self.cfg.crit_order, self.budget.delta,
                                                   self.cfg.cheb_nodes, key)
        return self.families[key]

    def init_extended(self) -> None:
        lo, hi = self.omega
        delta = self.budget.delta
        fam = self.family(0)
        N = self.N
        zx, _ = image_curve(fam, np.array([hi]), 0)
        cx = fam.point(hi)[0]
        z = np.array([zx[0], _[0]])
        for n in range(1, N):
            z = np.array([1.0 - hi * z[0] * z[0] + self.s * z[1], self.s * z[0]])
            if abs(z[0] - cx) <= delta:
                raise StartupError(f"critical orbit at a={hi} enters the strip at n={n} < N={N}")
        birth = None
        for n in range(1, N + 1):
            x0, _, d0, _ = image_curve(fam, np.array([lo, 0.5 * (lo + hi), hi]), n, True)
            if np.min(np.abs(x0)) <= delta or not (np.all(d0 > 0) or np.all(d0 < 0)):
                raise StartupError(f"image of Omega is not a monotone curve outside the strip at n={n}")
            if abs(x0[2] - x0[0]) >= delta / 10:
                birth = n
                break
        if birth is None:
            raise StartupError(f"z_n(Omega) never sweeps delta/10 before N={N}")
        self.birth = birth
        slot = ExtendedSlot(0, fam, (lo, hi), birth, {"length": float(abs(x0[2] - x0[0]))})
        g = ParamInterval2D(lo, hi, 0, slot.new_id())
        slot.elements.append(g)
        self.slots.append(slot)

    # -- capture -------------------------------------------------------------
    def candidates(self, a: float) -> list:
        out = []
        for fam in self.families.values():
            if fam.covers(a):
                out.append(_Cand(fam.generation, fam.point(a), fam.ident))
        return out

    def capture(self, a: float, z: np.ndarray, n: int):
        cands = self.candidates(a)
        if self.b == 0:
            c = [c for c in cands if c.generation == 0][0]
            return c, None
        rec, cert = capture_binding_point(z, n, cands, self.budget, self.b, g_max=self.cfg.g_max)
        self.measurements["capture"].append((n, rec.generation, cert.vertical, cert.horizontal))
        return rec, cert

    # -- one slot, one step ----------------------------------------------------
    def _advance_slot(self, slot: ExtendedSlot, n: int) -> list:
        fam = slot.family
        delta = self.budget.delta
        tol = self.cfg.tol
        elems = self._monotone_pass(slot, n)
        if not elems:
            return []
        ends = np.array([[g.lo, g.hi] for g in elems]).reshape(-1)
        X, _ = image_curve(fam, ends, n)
        X = X.reshape(-1, 2)
        plans = []
        req = ([], [], [], [])
        nreq = 0
        pending, doomed, measured = [], [], []
        for g, (x0, x1) in zip(elems, X):
            if n == slot.birth and not g.itinerary:
                g.itinerary.append((n, "escape", 0, 0))
                g.escapes.append((n, g.lo, g.hi, 0, 0))
            g.cls = "escape_situation"
            lo_x, hi_x = min(x0, x1), max(x0, x1)
            near = hi_x >= -delta - 1e-3 and lo_x <= delta + 1e-3
            center = 0.0
            if near:
                probe = self.gamma.lowest_in(g.lo, g.hi)
                if probe is None:
                    probe = g.lo
                zx, zy = image_curve(fam, np.array([probe]), n)
                try:
                    rec, _ = self.capture(probe, np.array([zx[0], zy[0]]), n)
                    center = float(rec.location[0])
                    g.binding = rec.ident
                except CaptureFailure as exc:
                    self._falsify(n, slot, g, "capture", str(exc))
            geom = StripGeometry(delta, self.budget.r_delta, self.r_max, center)
            straddle = [center] if (x0 - center) * (x1 - center) < 0 else []
            if n <= g.bound_until:
                g.cls = "bound"
                kind, targets, labels, xs = "bound", straddle, (hi_x >= center - delta and lo_x <= center + delta), None
            elif hi_x < center - delta or lo_x > center + delta or geom.in_outermost(lo_x, hi_x):
                kind, targets, labels, xs = "pass", [], None, None
            else:
                inner, labels = geom.pieces(lo_x, hi_x)
                bins = [l for l in labels if not isinstance(l, str)]
                if len(bins) == len(labels) and len(bins) <= 2:
                    kind, targets, labels, xs = "inessential", straddle, bins, None
                else:
                    kind, targets, xs = "chop", inner, np.concatenate([[lo_x], inner, [hi_x]])
            k = len(targets)
            if k:
                req[0].append(np.full(k, g.lo))
                req[1].append(np.full(k, g.hi))
                req[2].append(np.asarray(targets, dtype=float))
                req[3].append(np.full(k, x1 > x0))
            plans.append((g, kind, nreq, k, labels, xs, x1 > x0, center))
            nreq += k
        cat = lambda v, dt=float: np.concatenate(v) if v else np.zeros(0, dtype=dt)
        cuts = batch_bisect(lambda m: image_curve(fam, m, n)[0], cat(req[0]), cat(req[1]),
                            cat(req[2]), cat(req[3], bool), tol)
        out = []
        for g, kind, start, cnt, labels, xs, inc, center in plans:
            cs = cuts[start:start + cnt]
            if kind == "pass":
                out.append(g)
                continue
            if kind in ("bound", "inessential"):
                if kind == "bound":
                    if labels:
                        g.itinerary.append((n, "bound", 0, 0))
                else:
                    r = min(abs(l[0]) for l in labels)
                    g.itinerary.append((n, "inessential", r, 0))
                    g.R += r
                    g.cls = "inessential"
                    pending.append((g, center))
                if cnt and g.lo < cs[0] < g.hi:
                    for lo_, hi_ in ((g.lo, cs[0]), (cs[0], g.hi)):
                        out.append(self._child(slot, g, lo_, hi_))
                else:
                    out.append(g)
                continue
            ps = np.concatenate([[g.lo], cs if inc else cs[::-1], [g.hi]])
            labs = labels if inc else labels[::-1]
            xlen = np.diff(xs) if inc else np.diff(xs)[::-1]
            pieces = [[ps[i], ps[i + 1], lab, float(xlen[i])]
                      for i, lab in enumerate(labs) if ps[i + 1] > ps[i]]
            i = 0
            while i < len(pieces):
                pc = pieces[i]
                if isinstance(pc[2], str) and pc[3] < delta / 10 and len(pieces) > 1:
                    nb = pieces[i + 1 if i + 1 < len(pieces) else i - 1]
                    nb[0], nb[1] = min(nb[0], pc[0]), max(nb[1], pc[1])
                    nb[3] += pc[3]
                    pieces.pop(i)
                    continue
                i += 1
            ratios = []
            for lo_, hi_, lab, xl in pieces:
                c = self._child(slot, g, lo_, hi_)
                if isinstance(lab, str):
                    c.itinerary.append((n, "escape", 0, 0))
                    c.escapes.append((n, c.lo, c.hi, c.E, c.R))
                    c.cls = "escape"
                else:
                    r = abs(lab[0])
                    c.itinerary.append((n, "essential", int(lab[0]), int(lab[1])))
                    c.E += r
                    c.R += r
                    c.cls = "essential"
                    if not (n >= self.N and c.E > self.tau * n):
                        pending.append((c, center))
                    else:
                        doomed.append((c, center))
                    ratios.append(xl / (hi_ - lo_))
                out.append(c)
            if len(ratios) > 1:
                self.measurements["distortion"].append(max(ratios) / min(ratios))
            # children excluded at this step never use their binding period; a few
            # are still measured so that every return depth is represented
            if doomed:
                pick = np.unique(np.linspace(0, len(doomed) - 1, self.cfg.doomed_samples).astype(int))
                measured.extend(doomed[i] for i in pick)
            doomed = []
        self._bind_all(slot, pending, n)
        self._bind_all(slot, measured, n, assign=False)
        return out

    def _child(self, slot, g, lo, hi) -> ParamInterval2D:
        return ParamInterval2D(lo, hi, slot.ident, slot.new_id(), g.ident, list(g.itinerary),
                               list(g.escapes), g.E, g.R, g.bound_until, g.cls, "active", "",
                               g.binding, g.p_len)

    def _monotone_pass(self, slot: ExtendedSlot, n: int) -> list:
        elems = slot.elements
        if not elems:
            return []
        pts = np.array([[g.lo, 0.5 * (g.lo + g.hi), g.hi] for g in elems]).reshape(-1)
        _, _, dx, _ = image_curve(slot.family, pts, n, True)
        dx = dx.reshape(-1, 3)
        out = []
        for g, d in zip(elems, dx):
            if np.all(d > 0) or np.all(d < 0):
                out.append(g)
                continue
            lo, hi = g.lo, g.hi
            for _ in range(200):
                m = 0.5 * (lo + hi)
                dm = image_curve(slot.family, np.array([m]), n, True)[2][0]
                if (dm > 0) == (d[0] > 0):
                    lo = m
                else:
                    hi = m
                if hi - lo <= self.cfg.tol:
                    break
            c = 0.5 * (lo + hi)
            if g.lo < c < g.hi:
                self.log({"event": "monotone_split", "time": n, "slot": slot.ident, "at": c})
                out.extend([self._child(slot, g, g.lo, c), self._child(slot, g, c, g.hi)])
            else:
                out.append(g)
        return out

    def _bind_all(self, slot: ExtendedSlot, pending: list, n: int, assign: bool = True) -> None:
        """Binding periods at the probe of each returning element, constant over it."""
        if not pending:
            return
        L = self.cfg.binding_extra
        fam = slot.family
        probes = []
        for g, _ in pending:
            p = self.gamma.lowest_in(g.lo, g.hi)
            probes.append(g.lo if p is None else p)
        A = np.array(probes)
        x, y = image_curve(fam, A, n)
        # xi_i = Psi^(i+1)(z_n), zeta_i = Psi^(i+1)(zeta)
        Xi, Yi = orbit_block(A, 1.0 - A * x * x + self.s * y, self.s * x, L, self.s)
        zx = np.empty(len(A))
        zy = np.empty(len(A))
        for c, (g, center) in enumerate(pending):
            cands = {cd.ident: cd for cd in self.candidates(probes[c])}
            pt = cands[g.binding].location if g.binding in cands else np.zeros(2)
            zx[c], zy[c] = pt
        Zx, Zy = orbit_block(A, 1.0 - A * zx * zx + self.s * zy, self.s * zx, L, self.s)
        dist = np.hypot(Xi - Zx, Yi - Zy)
        with np.errstate(divide="ignore"):
            d0 = np.abs(x - zx)
        for c, (g, _) in enumerate(pending):
            p = binding_from_distances(dist[:, c], self.budget.alpha)
            if d0[c] > 0:
                self.measurements["binding"].append((n, float(-math.log(d0[c])), p))
            if not assign:
                continue
            g.bound_until = n + p
            g.p_len = p
            # the parameter interval must be small for one binding point to serve all of it
            lhs = math.exp(-self.budget.alpha * n)
            rhs = 10 * self.b ** 0.05 * g.length if self.b > 0 else 0.0
            self.measurements["margin_gamma"].append(lhs - rhs)
            self.measurements["kappa0"].append((n, g.length))
            if not lhs > rhs:
                self._falsify(n, slot, g, "binding_across_parameters", f"{lhs} <= {rhs}")

    def _falsify(self, n, slot, g, kind, detail):
        rec = {"schema_version": SCHEMA_VERSION, "type": "falsification", "n": n,
               "slot": slot.ident, "id": g.ident if g is not None else None,
               "kind": kind, "detail": detail}
        self.falsifications.append(rec)
        self.records.append(rec)

    # -- a full step ----------------------------------------------------------
    def step(self) -> dict:
        n = self.time + 1
        refined = {}
        for slot in self.slots:
            refined[slot.ident] = self._advance_slot(slot, n)
        # exclusions: E by the tau rule, E-hat adds interaction deletions
        E_sets, Ehat_sets = [], []
        for slot in self.slots:
            for g in refined[slot.ident]:
                if n >= self.N and g.E > self.tau * n:
                    g.status, g.cause = "excluded", "tau"
                    E_sets.append((g.lo, g.hi))
                    Ehat_sets.append((g.lo, g.hi))
                elif self.gamma.lowest_in(g.lo, g.hi) is None:
                    g.status, g.cause = "deleted", "interaction"
                    Ehat_sets.append((g.lo, g.hi))
        g1 = self.gamma.minus(IntervalSet(E_sets))
        g2 = self.gamma.minus(IntervalSet(Ehat_sets))
        if not g1 == g2:
            self._falsify(n, self.slots[0], None, "set_identity", f"{g1.measure()} vs {g2.measure()}")
        before = self.gamma.measure()
        self.gamma = g1
        excluded_n = before - g1.measure()
        self.excluded_total += excluded_n
        per_slot_excl = {}
        for slot in self.slots:
            els = refined[slot.ident]
            per_slot_excl[slot.ident] = float(sum(g.length for g in els if g.status == "excluded"))
            for g in els:
                if g.status == "active":
                    ok, info = verify_star_from_depths(g, n, self.budget.alpha, self.budget.C_depth)
                    if n >= self.N and not ok:
                        self._falsify(n, slot, g, "star_from_depths", str(info))
                    bad = validate_itinerary(g, self.budget.r_delta) if n >= slot.birth else []
                    if bad:
                        self._falsify(n, slot, g, "grammar", ";".join(bad))
                self.records.append(g.record(n, full=n == self.cfg.horizon))
            slot.elements = sorted((g for g in els if g.status == "active"), key=lambda g: g.lo)
        self._slow_variation(n)
        new_slots = self.spawn_slots(n)
        mult = max_multiplicity([(g.lo, g.hi) for s in self.slots for g in s.elements])
        logcap = log_cardinality_cap(n + 1, self.budget, self.b) if self.b > 0 else 0.0
        if math.log(max(mult, 1)) > logcap + 1e-12:
            self._falsify(n, self.slots[0], None, "multiplicity", f"{mult} slots over one parameter")
        self.time = n
        row = {"schema_version": SCHEMA_VERSION, "type": "step", "n": n,
               "retained_measure": self.gamma.measure(), "excluded_measure": excluded_n,
               "slot_excluded": {str(k): v for k, v in per_slot_excl.items()},
               "slot_omega": {str(s.ident): s.omega[1] - s.omega[0] for s in self.slots},
               "active": sum(len(s.elements) for s in self.slots), "slots": len(self.slots),
               "new_slots": new_slots, "multiplicity": mult}
        self.records.append(row)
        self.step_rows.append(row)
        self.log({"event": "step", "n": n, "active": row["active"], "slots": len(self.slots)})
        return row

    def run(self) -> list:
        while self.time < self.cfg.horizon:
            self.step()
        self.final_checks()
        return self.records

    # -- checks ----------------------------------------------------------------
    def slow_variation_check(self, slot: ExtendedSlot, g: ParamInterval2D) -> tuple[bool, float]:
        """|zeta(a) - zeta(a~)| <= b^(1/20) |a - a~| for the endpoint pair."""
        fam = slot.family
        if self.b == 0:
            return True, 0.0
        lhs = float(np.linalg.norm(fam.point(g.hi) - fam.point(g.lo)))
        rhs = self.b ** 0.05 * (g.hi - g.lo)
        ratio = lhs / (g.hi - g.lo) if g.hi > g.lo else 0.0
        return lhs <= rhs, ratio

    def _slow_variation(self, n: int) -> None:
        for slot in self.slots:
            els = slot.elements
            if not els:
                continue
            idx = np.unique(np.linspace(0, len(els) - 1, self.cfg.slow_samples).astype(int))
            for i in idx:
                ok, ratio = self.slow_variation_check(slot, els[i])
                self.measurements["slow_variation"].append(ratio)
                if not ok:
                    self._falsify(n, slot, els[i], "slow_variation", f"ratio {ratio}")

    def spawn_slots(self, n: int) -> int:
        """New slots for higher-generation critical points over escape elements."""
        if self.b == 0 or self.cfg.g_max < 1:
            return 0
        gmax = allowed_generation(n, self.budget, self.b, self.cfg.g_max)
        made = 0
        for gen in range(1, gmax + 1):
            key = f"g{gen}"
            covered = IntervalSet(s.omega for s in self.slots if s.family.ident == key)
            cands = []
            for slot in self.slots:
                for g in slot.elements:
                    if g.itinerary and g.itinerary[-1][:2] == (n, "escape"):
                        if covered.lowest_in(g.lo, g.hi) is None or \
                                IntervalSet([(g.lo, g.hi)]).minus(covered).measure() > 0:
                            cands.append((g.lo, g.hi))
            if not cands:
                continue
            try:
                fam = self.family(gen)
            except NonAdmissibleConfiguration as exc:
                self.log({"event": "spawn_failed", "n": n, "generation": gen, "why": str(exc)})
                continue
            for i in minimal_cover(cands):
                lo, hi = cands[i]
                x, _ = image_curve(fam, np.array([lo, hi]), n)
                length = float(abs(x[1] - x[0]))
                if length < self.budget.delta / 10:
                    self.log({"event": "birth_certificate_failed", "n": n, "lo": lo, "hi": hi})
                    continue
                slot = ExtendedSlot(len(self.slots), fam, (lo, hi), n, {"length": length})
                g = ParamInterval2D(lo, hi, slot.ident, slot.new_id(), None,
                                    [(n, "escape", 0, 0)], [(n, lo, hi, 0, 0)])
                g.cls = "escape"
                slot.elements.append(g)
                self.slots.append(slot)
                self.records.append({"schema_version": SCHEMA_VERSION, "type": "slot", "n": n,
                                     "slot": slot.ident, "family": fam.ident, "generation": gen,
                                     "lo": lo, "hi": hi, "birth_length": length})
                made += 1
        return made

    def final_checks(self) -> None:
        """(*) implies EG at sampled retained parameters of every slot."""
        n = self.time
        for slot in self.slots:
            els = slot.elements
            if not els:
                continue
            idx = np.unique(np.linspace(0, len(els) - 1, self.cfg.eg_samples).astype(int))
            for i in idx:
                a = self.gamma.lowest_in(els[i].lo, els[i].hi)
                if a is None:
                    continue
                led = self.pointwise_ledger(slot, a, n)
                star = led.star_sum_until(n) <= self.budget.alpha * n
                p = ParameterPoint(a, self.b)
                z0 = slot.family.point(a)
                xi0 = np.array([1.0 - a * z0[0] ** 2 + self.s * z0[1], self.s * z0[0]])
                eg = check_EG(p, xi0, np.array([1.0, 0.0]), n, self.budget.kappa)
                self.records.append({"schema_version": SCHEMA_VERSION, "type": "eg", "slot": slot.ident,
                                     "a": a, "star": bool(star), "star_sum": led.star_sum_until(n),
                                     "eg_margin": eg.min_margin})
                if star and not eg.ok:
                    self._falsify(n, slot, els[i], "star_implies_EG", f"margin {eg.min_margin}")

    def pointwise_ledger(self, slot: ExtendedSlot, a: float, horizon: int) -> RecurrenceLedger:
        """Free and bound returns of the slot's critical orbit at one parameter."""
        L = self.cfg.binding_extra
        fam = slot.family
        z = fam.point(a)
        A = np.array([a])
        X, Y = orbit_block(A, np.array([1.0 - a * z[0] ** 2 + self.s * z[1]]),
                           np.array([self.s * z[0]]), horizon + L + 1, self.s)
        delta = self.budget.delta
        led = RecurrenceLedger(horizon)
        bound_until = 0
        for n in range(1, horizon + 1):
            pt = np.array([X[n, 0], Y[n, 0]])
            try:
                rec, _ = self.capture(a, pt, n)
            except CaptureFailure:
                continue
            d = abs(pt[0] - rec.location[0])
            if d > delta:
                continue
            if n <= bound_until:
                led.events.append(ReturnEvent(n, "bound", d, rec.ident, 0, rec.generation))
                continue
            zx, zy = rec.location
            Zx, Zy = orbit_block(A, np.array([1.0 - a * zx * zx + self.s * zy]),
                                 np.array([self.s * zx]), L, self.s)
            dist = np.hypot(X[n + 1:n + 1 + L + 1, 0] - Zx[:, 0], Y[n + 1:n + 1 + L + 1, 0] - Zy[:, 0])
            p = binding_from_distances(dist, self.budget.alpha)
            led.events.append(ReturnEvent(n, "free", d, rec.ident, p, rec.generation))
            bound_until = n + p
        return led


@dataclass
class _Cand:
    generation: int
    location: np.ndarray
    ident: str
