"""One-dimensional parameter exclusion for phi_a(x) = 1 - a x^2.

Two engines share the same itinerary rules:

* `ExactEngine1D` keeps a true partition of the good set into parameter
  intervals.  At each time n the image z_n(gamma) of every element is
  examined; the partition of the critical strip into the rings
  (e^-(r+1), e^-r] cut into r^2 equal pieces is pulled back, returns are
  recorded with their depths, and elements whose recurrence budget is
  exceeded are removed whole.
* `SampledEngine1D` applies the same rules pointwise on a uniform
  parameter grid.  It is the quadrature version of the construction,
  needed at long horizons where the exact partition has far too many
  elements to enumerate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .family import ConstantBudget
from .recurrence import binding_period, binding_from_distances


class AtCriticalPoint(ValueError):
    pass


class StartupError(RuntimeError):
    """A startup assertion on (Omega, N) failed."""


# ---------------------------------------------------------------------------
# parameter-to-phase maps

def param_phase_map(a, k: int):
    """z_k(a) = phi_a^(k+1)(0); a may be an array."""
    if k < 0:
        raise ValueError("k must be non-negative")
    a = np.asarray(a, dtype=float)
    x = np.ones_like(a)
    for _ in range(k):
        x = 1.0 - a * x * x
    return x if x.ndim else float(x)


def param_phase_map_with_derivative(a, k: int):
    """(z_k(a), dz_k/da) for arrays of a."""
    a = np.asarray(a, dtype=float)
    x = np.ones_like(a)
    d = np.zeros_like(a)
    for _ in range(k):
        x, d = 1.0 - a * x * x, -x * x - 2.0 * a * x * d
    return x, d


def critical_orbit_1d(a: float, n: int) -> np.ndarray:
    out = np.empty(n + 1)
    x = 1.0
    for i in range(n + 1):
        out[i] = x
        x = 1.0 - a * x * x
    return out


# ---------------------------------------------------------------------------
# the partition of the critical strip

def ring(x: float) -> int:
    """r >= 0 with |x| in (e^-(r+1), e^-r]."""
    ax = abs(x)
    r = int(math.floor(-math.log(ax)))
    while ax > math.exp(-r):
        r -= 1
    while ax <= math.exp(-r - 1):
        r += 1
    return r


def bin_width(r: int) -> float:
    return (math.exp(-r) - math.exp(-r - 1)) / (r * r)


def phase_partition_index(x: float, delta: float):
    """(signed r, m) for x in the strip, None outside.

    Rings are half-open (e^-(r+1), e^-r]; the r^2 pieces of a ring are
    half-open the same way and m counts from the inner edge outward.
    """
    if x == 0:
        raise AtCriticalPoint("x = 0")
    if abs(x) > delta:
        return None
    r = ring(x)
    inner = math.exp(-r - 1)
    m = int(math.ceil((abs(x) - inner) / bin_width(r)))
    m = min(max(m, 1), r * r)
    return (r if x > 0 else -r), m


@dataclass(frozen=True)
class StripGeometry:
    """Bin edges of the strip partition down to depth r_max, centred at c.

    Points with |x - c| <= e^-(r_max+1) form two core bins labelled
    (+-(r_max+1), 1) split at c itself.
    """

    delta: float
    r_delta: int
    r_max: int
    center: float = 0.0

    def edges(self) -> np.ndarray:
        """Sorted absolute offsets of all edges in (0, delta], plus 0."""
        out = [0.0]
        for r in range(self.r_delta, self.r_max + 1):
            inner = math.exp(-r - 1)
            w = bin_width(r)
            out.extend(inner + j * w for j in range(r * r))
        out.append(self.delta)
        return np.unique(np.array(out))

    def signed_edges(self) -> np.ndarray:
        e = self.edges()
        return np.concatenate([-e[::-1], e[1:]]) + self.center

    @cached_property
    def table(self) -> tuple[np.ndarray, list]:
        """(sorted signed edges, label of each gap between consecutive edges)."""
        E = self.signed_edges()
        labs = [self.label(0.5 * (E[j] + E[j + 1])) for j in range(len(E) - 1)]
        return E, labs

    def pieces(self, lo: float, hi: float) -> tuple[np.ndarray, list]:
        """Edges strictly inside (lo, hi) and the labels of the pieces they cut."""
        E, labs = self.table
        j0 = int(np.searchsorted(E, lo, side="right"))
        j1 = int(np.searchsorted(E, hi, side="left"))
        inner = E[j0:j1]
        out = []
        for j in range(j0 - 1, j1):
            out.append("L" if j < 0 else "R" if j >= len(labs) else labs[j])
        return inner, out

    def label(self, x: float):
        """Label of a point strictly inside a piece: 'L', 'R' or (r, m)."""
        u = x - self.center
        if u > self.delta:
            return "R"
        if u < -self.delta:
            return "L"
        if u == 0:
            raise AtCriticalPoint("label at the centre")
        if abs(u) <= math.exp(-self.r_max - 1):
            return ((self.r_max + 1) if u > 0 else -(self.r_max + 1), 1)
        return phase_partition_index(u, self.delta)

    def outermost_width(self) -> float:
        return bin_width(self.r_delta)

    def in_outermost(self, lo: float, hi: float) -> bool:
        """Does [lo, hi] meet the strip only inside one outermost piece?"""
        w = self.outermost_width()
        a, b = lo - self.center, hi - self.center
        if b >= self.delta - w and a > self.delta - w:
            return True
        if a <= -(self.delta - w) and b < -(self.delta - w):
            return True
        return False


# ---------------------------------------------------------------------------
# intervals and ledgers

@dataclass
class ParamInterval1D:
    lo: float
    hi: float
    itinerary: list = field(default_factory=list)   # (time, kind, r, m)
    status: str = "active"
    excluded_at: Optional[int] = None
    cause: str = ""
    bound_until: int = 0
    E: int = 0
    R: int = 0
    star: int = 0

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def child(self, lo: float, hi: float) -> "ParamInterval1D":
        return ParamInterval1D(lo, hi, list(self.itinerary), "active", None, "",
                               self.bound_until, self.E, self.R, self.star)

    def to_json(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "status": self.status,
                "excluded_at": self.excluded_at, "cause": self.cause,
                "E": self.E, "R": self.R, "star": self.star,
                "itinerary": [list(t) for t in self.itinerary]}


@dataclass
class MeasureLedger:
    omega: float
    rows: list = field(default_factory=list)   # dicts per step

    def add(self, k, retained, excluded, count, max_depth):
        self.rows.append({"k": k, "retained_measure": retained, "excluded_measure": excluded,
                          "active_interval_count": count, "max_depth": max_depth})

    def excluded_fractions(self, start: int = 0) -> tuple[np.ndarray, np.ndarray]:
        ks = np.array([r["k"] for r in self.rows if r["k"] >= start])
        ex = np.array([r["excluded_measure"] for r in self.rows if r["k"] >= start])
        prev = []
        ret = {r["k"]: r["retained_measure"] for r in self.rows}
        for k in ks:
            prev.append(ret.get(k - 1, self.omega))
        return ks, ex / np.maximum(np.array(prev), 1e-300)

    def fitted_decay(self, start: int) -> float:
        """Least-squares slope of log(excluded fraction) vs k over k >= start."""
        ks, fr = self.excluded_fractions(start)
        m = fr > 0
        if m.sum() < 2:
            return float("nan")
        return float(np.polyfit(ks[m], np.log(fr[m]), 1)[0])

    def check(self) -> list[str]:
        out = []
        prev = self.omega
        for r in self.rows:
            if r["retained_measure"] > prev * (1 + 1e-12):
                out.append(f"retained increased at k={r['k']}")
            if abs(prev - r["retained_measure"] - r["excluded_measure"]) > 1e-12 * self.omega:
                out.append(f"accounting mismatch at k={r['k']}")
            prev = r["retained_measure"]
        return out

    def to_csv(self) -> str:
        head = "k,retained_measure,excluded_measure,active_interval_count,max_depth\n"
        body = "".join(f"{r['k']},{r['retained_measure']!r},{r['excluded_measure']!r},"
                       f"{r['active_interval_count']},{r['max_depth']}\n" for r in self.rows)
        return head + body


def birth_time(lo: float, hi: float, N: int, delta: float) -> int:
    """First n <= N with |z_n(Omega)| >= delta/10, the orbit staying outside the strip.

    Raises StartupError if the critical orbit at a = hi meets the strip before
    N or no such n exists.
    """
    zs = critical_orbit_1d(hi, N)
    for n in range(1, N):
        if abs(zs[n]) <= delta:
            raise StartupError(f"critical orbit at a={hi} enters the strip at n={n} < N={N}")
    for n in range(1, N + 1):
        (x0, x1), (d0, d1) = param_phase_map_with_derivative(np.array([lo, hi]), n)
        if min(abs(x0), abs(x1)) <= delta or x0 * x1 < 0 or d0 * d1 <= 0:
            raise StartupError(f"image of Omega is not a monotone curve outside the strip at n={n}")
        if abs(x1 - x0) >= delta / 10:
            return n
    raise StartupError(f"z_n(Omega) never sweeps delta/10 before N={N}")


# ---------------------------------------------------------------------------
# exact engine

def batch_bisect(f: Callable, lo: np.ndarray, hi: np.ndarray, targets: np.ndarray,
                 increasing: np.ndarray, tol: float) -> np.ndarray:
    """Solve f(a) = target on each [lo, hi] (f monotone there), all at once."""
    if len(targets) == 0:
        return np.zeros(0)
    a, b = lo.astype(float).copy(), hi.astype(float).copy()
    for _ in range(200):
        if np.all(b - a <= tol):
            break
        m = 0.5 * (a + b)
        fm = f(m)
        below = np.where(increasing, fm < targets, fm > targets)
        a = np.where(below, m, a)
        b = np.where(below, b, m)
    return 0.5 * (a + b)


class ExactEngine1D:
    """True partition of the good set, advanced one time step at a time."""

    def __init__(self, lo: float, hi: float, budget: ConstantBudget, alpha: Optional[float] = None,
                 rule: str = "star", r_max: Optional[int] = None, binding_extra: int = 120,
                 tol: float = 1e-14, log: Optional[Callable] = None):
        self.budget = budget
        self.alpha = budget.alpha if alpha is None else alpha
        self.rule = rule
        self.geom = StripGeometry(budget.delta, budget.r_delta,
                                  r_max if r_max is not None else 2 * budget.r_delta)
        self.tol = tol
        self.extra = binding_extra
        self.N = budget.N
        self.omega = (lo, hi)
        self.birth = birth_time(lo, hi, budget.N, budget.delta)
        self.active = [ParamInterval1D(lo, hi)]
        self.excluded: list = []
        self.time = 0
        self.ledger = MeasureLedger(hi - lo)
        self.log = log or (lambda rec: None)
        self.distortion: list = []

    # -- helpers -----------------------------------------------------------
    def _binding(self, a: float, n: int) -> int:
        z = critical_orbit_1d(a, n + 1 + self.extra)
        return binding_period(z[n + 1:], z, self.alpha)

    def _bind_all(self, elems: list, n: int) -> None:
        """Binding periods at the left endpoints of all returning elements."""
        if not elems:
            return
        A = np.array([g.lo for g in elems])
        L = self.extra
        Z = np.empty((n + 2 + L, len(A)))
        x = np.ones_like(A)
        for i in range(n + 2 + L):
            Z[i] = x
            x = 1.0 - A * x * x
        dist = np.abs(Z[n + 1:n + 1 + L] - Z[:L])
        for c, g in enumerate(elems):
            g.bound_until = n + binding_from_distances(dist[:, c], self.alpha)

    def _monotone_pass(self, elems: list, n: int) -> list:
        """Split elements where dz_n/da changes sign (monotonicity guard)."""
        if not elems:
            return []
        pts = np.array([[g.lo, 0.5 * (g.lo + g.hi), g.hi] for g in elems])
        _, d = param_phase_map_with_derivative(pts.reshape(-1), n)
        d = d.reshape(-1, 3)
        out = []
        for g, dd in zip(elems, d):
            if np.all(dd > 0) or np.all(dd < 0):
                out.append(g)
                continue
            lo, hi = g.lo, g.hi
            for _ in range(200):
                m = 0.5 * (lo + hi)
                _, dm = param_phase_map_with_derivative(np.array([m]), n)
                if (dm[0] > 0) == (dd[0] > 0):
                    lo = m
                else:
                    hi = m
                if hi - lo <= self.tol:
                    break
            c = 0.5 * (lo + hi)
            if g.lo < c < g.hi:
                self.log({"event": "monotone_split", "time": n, "at": c})
                out.extend([g.child(g.lo, c), g.child(c, g.hi)])
            else:
                out.append(g)
        return out

    def _budget_exceeded(self, g: ParamInterval1D, n: int) -> bool:
        if self.rule == "star":
            return g.star > self.alpha * n
        return g.E > self.budget.tau * n

    # -- one step ------------------------------------------------------------
    def _classify(self, g: ParamInterval1D, n: int, x0: float, x1: float):
        """('pass' | 'bound' | 'inessential' | 'chop', targets, labels, xs)."""
        geom = self.geom
        c, delta = geom.center, geom.delta
        lo_x, hi_x = min(x0, x1), max(x0, x1)
        straddle = [c] if (x0 - c) * (x1 - c) < 0 else []
        if n <= g.bound_until:
            meets = hi_x >= c - delta and lo_x <= c + delta
            return "bound", straddle, meets, None
        if hi_x < c - delta or lo_x > c + delta or geom.in_outermost(lo_x, hi_x):
            return "pass", [], None, None
        inner, labels = geom.pieces(lo_x, hi_x)
        bins = [l for l in labels if not isinstance(l, str)]
        if len(bins) == len(labels) and len(bins) <= 2:
            return "inessential", straddle, bins, None
        xs = np.concatenate([[lo_x], inner, [hi_x]])
        return "chop", inner, labels, xs

    def step(self) -> dict:
        n = self.time + 1
        delta = self.geom.delta
        max_depth = 0
        pending = []
        work = self._monotone_pass(self.active, n)
        ends = np.array([[g.lo, g.hi] for g in work]).reshape(-1)
        zs = param_phase_map(ends, n).reshape(-1, 2) if len(work) else np.zeros((0, 2))
        plans = []
        req_lo, req_hi, req_t, req_inc = [], [], [], []
        nreq = 0
        for g, (x0, x1) in zip(work, zs):
            if n == self.birth:
                g.itinerary.append((n, "escape", 0, 0))
            kind, targets, labels, xs = self._classify(g, n, x0, x1)
            k = len(targets)
            if k:
                req_lo.append(np.full(k, g.lo))
                req_hi.append(np.full(k, g.hi))
                req_t.append(np.asarray(targets, dtype=float))
                req_inc.append(np.full(k, x1 > x0))
            plans.append((g, kind, nreq, k, labels, xs, x1 > x0))
            nreq += k
        cat = lambda v, dt=float: np.concatenate(v) if v else np.zeros(0, dtype=dt)
        cuts = batch_bisect(lambda m: param_phase_map(m, n), cat(req_lo), cat(req_hi),
                            cat(req_t), cat(req_inc, bool), self.tol)
        new_active = []
        for g, kind, start, cnt, labels, xs, inc in plans:
            cs = cuts[start:start + cnt]
            if kind == "pass":
                new_active.append(g)
                continue
            if kind in ("bound", "inessential"):
                if kind == "bound":
                    if labels:
                        g.itinerary.append((n, "bound", 0, 0))
                else:
                    r = min(abs(l[0]) for l in labels)
                    g.itinerary.append((n, "inessential", r, 0))
                    g.R += r
                    g.star += r
                    max_depth = max(max_depth, r)
                    pending.append(g)
                if cnt and g.lo < cs[0] < g.hi:
                    new_active.extend([g.child(g.lo, cs[0]), g.child(cs[0], g.hi)])
                else:
                    new_active.append(g)
                continue
            # chopping: pieces in parameter order
            ps = np.concatenate([[g.lo], cs if inc else cs[::-1], [g.hi]])
            labs = labels if inc else labels[::-1]
            xlen = np.diff(xs) if inc else np.diff(xs)[::-1]
            pieces = [[ps[i], ps[i + 1], lab, float(xlen[i])]
                      for i, lab in enumerate(labs) if ps[i + 1] > ps[i]]
            # glue short escape components to the neighbouring return piece
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
                c = g.child(lo_, hi_)
                if isinstance(lab, str):
                    c.itinerary.append((n, "escape", 0, 0))
                else:
                    r = abs(lab[0])
                    c.itinerary.append((n, "essential", int(lab[0]), int(lab[1])))
                    c.E += r
                    c.R += r
                    c.star += r
                    max_depth = max(max_depth, r)
                    if not (n >= self.N and self._budget_exceeded(c, n)):
                        pending.append(c)
                    ratios.append(xl / (hi_ - lo_))
                new_active.append(c)
            if len(ratios) > 1:
                self.distortion.append(max(ratios) / min(ratios))
        self._bind_all(pending, n)
        # exclusion of whole refined elements
        before = sum(g.length for g in self.active)
        kept, excl = [], 0.0
        for g in new_active:
            if n >= self.N and self._budget_exceeded(g, n):
                g.status = "excluded"
                g.excluded_at = n
                g.cause = self.rule
                self.excluded.append(g)
                excl += g.length
            else:
                kept.append(g)
        kept.sort(key=lambda g: g.lo)
        self.active = kept
        self.time = n
        retained = sum(g.length for g in kept)
        self.ledger.add(n, retained, before - retained, len(kept), max_depth)
        self.log({"event": "step", "time": n, "active": len(kept), "excluded": excl})
        return self.ledger.rows[-1]

    def run(self, horizon: int) -> MeasureLedger:
        while self.time < horizon:
            self.step()
        return self.ledger

    def check_partition(self) -> list[str]:
        out = []
        lo, hi = self.omega
        for a, b in zip(self.active, self.active[1:]):
            if a.hi > b.lo:
                out.append(f"overlap at {a.hi}")
        pieces = sorted(self.active + self.excluded, key=lambda g: g.lo)
        cover = sum(g.length for g in pieces)
        if abs(cover - (hi - lo)) > 1e-12 * (hi - lo):
            out.append("cover mismatch")
        return out


# ---------------------------------------------------------------------------
# sampled engine

class SampledEngine1D:
    """Pointwise itineraries on a uniform grid of cell midpoints."""

    def __init__(self, lo: float, hi: float, budget: ConstantBudget, alpha: Optional[float] = None,
                 samples: int = 2 ** 18, binding_extra: int = 120, check_startup: bool = True):
        self.budget = budget
        self.alpha = budget.alpha if alpha is None else alpha
        self.omega = (lo, hi)
        self.M = samples
        self.N = budget.N
        if check_startup:
            self.birth = birth_time(lo, hi, budget.N, budget.delta)
        else:
            self.birth = 1
        self.a = lo + (np.arange(samples) + 0.5) * (hi - lo) / samples
        self.extra = binding_extra
        self.excluded_at = np.zeros(samples, dtype=np.int64)   # 0 = retained
        self.star = np.zeros(samples)
        self.ledger = MeasureLedger(hi - lo)
        self.returns: list = []

    def run(self, horizon: int) -> MeasureLedger:
        H = horizon + self.extra
        M = self.M
        a = self.a
        Z = np.empty((H + 1, M))
        x = np.ones(M)
        for i in range(H + 1):
            Z[i] = x
            x = 1.0 - a * x * x
        delta, alpha = self.budget.delta, self.alpha
        bound_until = np.zeros(M, dtype=np.int64)
        star = np.zeros(M)
        cell = (self.omega[1] - self.omega[0]) / M
        alive = np.ones(M, dtype=bool)
        for n in range(1, horizon + 1):
            free = alive & (n > bound_until) & (np.abs(Z[n]) <= delta)
            idx = np.nonzero(free)[0]
            depth_max = 0
            if len(idx):
                with np.errstate(divide="ignore"):
                    logd = -np.log(np.abs(Z[n, idx]))
                star[idx] += logd
                depth_max = int(np.max(np.floor(logd)))
                # binding periods, vectorised over the returning samples
                L = H - n
                dist = np.abs(Z[n + 1:n + 1 + L, idx] - Z[:L, idx])
                p = np.empty(len(idx), dtype=np.int64)
                for c in range(len(idx)):
                    p[c] = binding_from_distances(dist[:, c], alpha)
                bound_until[idx] = n + p
                for c, i in enumerate(idx):
                    self.returns.append((int(i), n, float(Z[n, i]), int(p[c])))
            if n >= self.N:
                bad = alive & (star > alpha * n)
                self.excluded_at[bad] = n
                alive &= ~bad
            retained = alive.sum() * cell
            prev = self.ledger.rows[-1]["retained_measure"] if self.ledger.rows else M * cell
            self.ledger.add(n, float(retained), float(prev - retained), int(_runs(alive)), depth_max)
        self.star = star
        self.alive = alive
        return self.ledger


def _runs(mask: np.ndarray) -> int:
    if not mask.any():
        return 0
    m = mask.astype(np.int8)
    return int(m[0] + np.sum(np.diff(m) == 1))


def verify_retained_1d(a: float, k: int, kappa_prime: float) -> bool:
    """|D phi^j(phi(0))| >= exp(kappa' j) for all j <= k."""
    x, logd = 1.0, 0.0
    for j in range(1, k + 1):
        v = abs(2 * a * x)
        if v == 0:
            return False
        logd += math.log(v)
        if logd < kappa_prime * j:
            return False
        x = 1.0 - a * x * x
    return True


def refine_and_exclude_1d(engine: ExactEngine1D) -> dict:
    """Advance an exact engine from step k to k+1 (refine, then exclude)."""
    return engine.step()
