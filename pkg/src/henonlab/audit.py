"""Post-hoc audit of an extended-space run, computed from its event stream only.

The stream is the list of records written by the engine (element records
per step and slot, step summaries, slot births, falsifications).  Nothing
here looks at engine objects, so an audit of a saved `events.jsonl` and an
audit of the in-memory records agree exactly.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .extended import IntervalSet, SCHEMA_VERSION
from .family import ConstantBudget


class GrammarError(ValueError):
    pass


# ---------------------------------------------------------------------------
# counting

def count_compositions(R: int, r_delta: int) -> int:
    """Ordered tuples (r_1..r_t), t >= 1, r_i >= r_delta, summing to R."""
    if R < 0 or r_delta < 1:
        raise ValueError("need R >= 0 and r_delta >= 1")
    # f[s] = number of tuples (t >= 0) summing to s
    f = [0] * (R + 1)
    f[0] = 1
    for s in range(1, R + 1):
        f[s] = sum(f[s - r] for r in range(r_delta, s + 1))
    return f[R] if R > 0 else 0


def compositions_by_parts(R: int, r_delta: int) -> dict:
    """t -> number of compositions of R into exactly t parts >= r_delta."""
    out = {}
    t = 1
    while t * r_delta <= R:
        # stars and bars on the excess R - t r_delta over t parts
        out[t] = math.comb(R - t * r_delta + t - 1, t - 1)
        t += 1
    return out


def log_combinatorial_cap(R: int, r_delta: int) -> float:
    """log of sum_t C_t(R) (R/t)^t 2^t 2: sequences, multiplicities, signs, two escapes."""
    terms = [math.log(c) + t * math.log(R / t) + t * math.log(2) + math.log(2)
             for t, c in compositions_by_parts(R, r_delta).items() if c > 0]
    if not terms:
        return -math.inf
    m = max(terms)
    return m + math.log(sum(math.exp(x - m) for x in terms))


def analytic_combinatorial_table(r_delta: int, kappa_bar: float, R_max: int) -> list:
    rows = []
    for R in range(r_delta, R_max + 1):
        cap = log_combinatorial_cap(R, r_delta)
        rows.append({"R": R, "compositions": count_compositions(R, r_delta),
                     "log_cap": cap, "log_bound": kappa_bar * R,
                     "pass": cap <= kappa_bar * R})
    return rows


# ---------------------------------------------------------------------------
# reading the stream

def split_stream(records: list) -> dict:
    out = {"element": [], "step": [], "slot": [], "falsification": [], "eg": [], "meta": []}
    for r in records:
        if r.get("schema_version") != SCHEMA_VERSION:
            raise GrammarError(f"unsupported schema_version {r.get('schema_version')}")
        out.setdefault(r["type"], []).append(r)
    return out


@dataclass
class Node:
    level: int
    key: tuple
    lo: float
    hi: float
    E: int
    time: int

    @property
    def length(self) -> float:
        return self.hi - self.lo


@dataclass
class RenormChain:
    slot: int
    horizon: int
    omega: tuple
    levels: list = field(default_factory=list)       # list of dict key -> Node
    children: list = field(default_factory=list)     # per level: key -> set of child keys

    def descendants(self, i: int, key) -> list:
        return [self.levels[i + 1][k] for k in sorted(self.children[i].get(key, ()), key=str)]

    def delta_E(self, i: int, key, child: Node) -> int:
        return child.E - self.levels[i][key].E


def build_renorm_chain(elements_at_n: list, slot: int, omega: tuple, n: int) -> RenormChain:
    """Q^0..Q^L from the final refined partition of one slot (padding past the last escape)."""
    els = [r for r in elements_at_n if r["slot"] == slot]
    chain = RenormChain(slot, n, omega)
    if not els:
        return chain
    depth = max(len(r["escapes"]) for r in els)
    L = depth  # level L is the padded final partition
    chain.levels = [dict() for _ in range(L + 1)]
    chain.children = [defaultdict(set) for _ in range(L)]
    for r in els:
        esc = r["escapes"]
        if not esc or esc[0][0] is None:
            raise GrammarError(f"element {r['id']} has no birth escape")
        times = [e[0] for e in esc]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise GrammarError(f"element {r['id']}: escape times not increasing")
        path = []
        for i in range(L + 1):
            if i < len(esc):
                t, lo, hi, E, _R = esc[i]
                key = ("esc", t, lo, hi)
                node = Node(i, key, lo, hi, E, t)
            else:
                key = ("el", r["id"])
                node = Node(i, key, r["lo"], r["hi"], r["E"], n)
            prev = chain.levels[i].get(key)
            if prev is not None and (prev.lo, prev.hi, prev.E) != (node.lo, node.hi, node.E):
                raise GrammarError(f"inconsistent ancestor {key}")
            chain.levels[i][key] = node
            path.append(key)
        for i in range(L):
            a, b = chain.levels[i][path[i]], chain.levels[i + 1][path[i + 1]]
            if not (a.lo <= b.lo and b.hi <= a.hi):
                raise GrammarError(f"element {r['id']}: level {i + 1} not nested in level {i}")
            chain.children[i][path[i]].add(path[i + 1])
        if not (esc[0][1] <= r["lo"] and r["hi"] <= esc[0][2]):
            raise GrammarError(f"element {r['id']} not inside its birth interval")
    return chain


# ---------------------------------------------------------------------------
# bound checks

def metric_bound_check(chain: RenormChain, kappa_bar: float) -> dict:
    """|gamma'| <= exp(-3 kappa_bar R) |gamma| for every descendant gamma' with Delta E = R."""
    margins = []
    worst = None
    for i in range(len(chain.children)):
        for key, node in chain.levels[i].items():
            for ch in chain.descendants(i, key):
                R = chain.delta_E(i, key, ch)
                if R < 0:
                    raise GrammarError("negative increment")
                m = -3 * kappa_bar * R + math.log(node.length) - math.log(ch.length)
                margins.append(m)
                if worst is None or m < worst[0]:
                    worst = (m, i, R, node.length, ch.length)
    return {"count": len(margins), "min_margin": min(margins) if margins else None,
            "violations": int(sum(1 for m in margins if m < -1e-12)),
            "worst": list(worst) if worst else None}


def nesting_check(elements: list, kappa_bar: float) -> dict:
    """Per-step factor between nested intervals created at consecutive essential returns.

    Ancestry is followed through parent links in the stream; the interval
    created at an essential return is the first record of its id.
    """
    first = {}
    for r in elements:
        if r["id"] not in first:
            first[r["id"]] = r
    margins = []
    for r in elements:
        if r["status"] == "active" and r["class"] != "essential":
            continue
        chain = []
        cur = first.get(r["id"])
        seen = set()
        while cur is not None and cur["id"] not in seen:
            seen.add(cur["id"])
            if cur["class"] == "essential":
                chain.append((cur["n"], abs(cur["r"]), cur["hi"] - cur["lo"]))
            cur = first.get(cur["parent"]) if cur["parent"] else None
        chain.sort()
        for (t0, r0, l0), (t1, r1, l1) in zip(chain, chain[1:]):
            margins.append(-r1 + (1 - 3 * kappa_bar) * r0 - math.log(l1 / l0))
    return {"count": len(margins), "min_margin": min(margins) if margins else None,
            "violations": int(sum(1 for m in margins if m < -1e-12))}


def combinatorial_bound_check(chain: RenormChain, kappa_bar: float, r_delta: int) -> dict:
    """# descendants with Delta E = R against exp(kappa_bar R), R > 0."""
    hist = defaultdict(list)
    margins = []
    zero_counts = []
    for i in range(len(chain.children)):
        for key in chain.levels[i]:
            by_R = defaultdict(list)
            for ch in chain.descendants(i, key):
                by_R[chain.delta_E(i, key, ch)].append(ch)
            for R, group in by_R.items():
                hist[R].append((len(group), sum(c.length for c in group)))
                if R == 0:
                    zero_counts.append(len(group))
                    continue
                margins.append((kappa_bar * R - math.log(len(group)), R, len(group)))
    return {"count": len(margins),
            "min_margin": min(m for m, _, _ in margins) if margins else None,
            "violations": int(sum(1 for m, _, _ in margins if m < -1e-12)),
            "worst": list(min(margins)) if margins else None,
            "max_R0_count": max(zero_counts) if zero_counts else 0,
            "histogram": {str(R): {"max_count": max(c for c, _ in v), "total_length": sum(l for _, l in v)}
                          for R, v in sorted(hist.items())}}


def average_recurrence(chain: RenormChain, kappa_bar: float, r_delta: int) -> dict:
    """sum over Q^n of exp(kappa_bar E) |gamma| against exp(n / r_delta) |Omega_[z]|, plus per-level factors."""
    omega = chain.omega[1] - chain.omega[0]
    if not chain.levels:
        return {"integral": 0.0, "bound": math.exp(chain.horizon / r_delta) * omega,
                "margin": math.inf, "level_violations": 0, "level_min_margin": None}
    last = chain.levels[-1]
    integral = float(sum(math.exp(kappa_bar * nd.E) * nd.length for nd in last.values()))
    bound = math.exp(chain.horizon / r_delta) * omega
    lvl = []
    for i in range(len(chain.children)):
        for key, node in chain.levels[i].items():
            s = sum(math.exp(kappa_bar * chain.delta_E(i, key, ch)) * ch.length
                    for ch in chain.descendants(i, key))
            lvl.append(1.0 / r_delta + math.log(node.length) - math.log(s))
    return {"integral": integral, "bound": bound, "margin": math.log(bound) - math.log(integral),
            "level_violations": int(sum(1 for m in lvl if m < -1e-12)),
            "level_min_margin": min(lvl) if lvl else None}


def chebyshev_exclusion(steps: list, per_step_elements: dict, slot: int, omega_len: float,
                        tau: float, kappa_bar: float, r_delta: int) -> list:
    """Per n: measured |E^(n)_[z]| against the Chebyshev bound and the analytic bound."""
    rows = []
    for st in steps:
        n = st["n"]
        excl = float(st["slot_excluded"].get(str(slot), 0.0))
        els = per_step_elements.get((n, slot), [])
        integral = float(sum(math.exp(kappa_bar * r["E"]) * (r["hi"] - r["lo"]) for r in els))
        cheb = math.exp(-tau * kappa_bar * n) * integral
        analytic = math.exp((1.0 / r_delta - kappa_bar * tau) * n) * omega_len
        row = {"n": n, "excluded": excl, "chebyshev": cheb, "analytic": analytic,
               "pass": excl <= cheb * (1 + 1e-12) and excl <= analytic}
        if r_delta >= 2 / (kappa_bar * tau):
            row["analytic_half"] = math.exp(-kappa_bar * tau * n / 2) * omega_len
            row["pass"] = row["pass"] and analytic <= row["analytic_half"]
        rows.append(row)
    return rows


def final_measure_chain(steps: list, omega_len: float, N: int, tau: float, kappa_bar: float,
                        theta: float, rho: float) -> dict:
    retained = [s["retained_measure"] for s in steps]
    excl = [s["excluded_measure"] for s in steps]
    ok_identity = all(abs(omega_len - r - sum(excl[:i + 1])) <= 1e-12 * omega_len
                      for i, r in enumerate(retained))
    frac = [e / omega_len for s, e in zip(steps, excl) if s["n"] >= N]
    lower = (1 - sum(frac)) * omega_len
    final = retained[-1] if retained else omega_len
    totals = []
    for s, e in zip(steps, excl):
        n = s["n"]
        # the multiplicity bound is astronomically loose; keep it in log form
        log_b1 = -kappa_bar * tau * n / 2 + theta * n * math.log(5 / rho) + math.log(omega_len)
        b2 = math.exp(-kappa_bar * tau * n / 4) * omega_len
        ok1 = e <= 0 or math.log(e) <= log_b1
        totals.append({"n": n, "excluded": e, "log_bound_multiplicity": log_b1, "bound_quarter": b2,
                       "pass": ok1 and e <= b2})
    # labelled extrapolation: geometric fit of the positive exclusion fractions
    ks = np.array([s["n"] for s, e in zip(steps, excl) if s["n"] >= N and e > 0])
    fs = np.array([e / omega_len for s, e in zip(steps, excl) if s["n"] >= N and e > 0])
    extrap = None
    if len(ks) >= 2:
        slope, icpt = np.polyfit(ks, np.log(fs), 1)
        if slope < 0:
            q = math.exp(slope)
            tail = math.exp(icpt + slope * (ks[-1] + 1)) / (1 - q)
            extrap = {"slope": float(slope), "tail_fraction": float(tail),
                      "retained_fraction_limit": float(final / omega_len - tail)}
        else:
            extrap = {"slope": float(slope), "tail_fraction": None, "retained_fraction_limit": None}
    return {"identity": ok_identity, "lower_bound": lower, "retained": final,
            "chain_ok": lower <= final * (1 + 1e-12), "retained_fraction": final / omega_len,
            "totals": totals, "extrapolation": extrap}


def escape_renewal(chain: RenormChain) -> dict:
    """Mean Delta E per level, grouped by whether the ancestor had a return (reporting only)."""
    groups = defaultdict(list)
    for i in range(len(chain.children)):
        for key, node in chain.levels[i].items():
            tag = "ancestor_returned" if node.E > 0 else "ancestor_clean"
            for ch in chain.descendants(i, key):
                groups[tag].append(chain.delta_E(i, key, ch))
    return {k: {"n": len(v), "mean_delta_E": float(np.mean(v))} for k, v in groups.items()}


# ---------------------------------------------------------------------------
# the report

@dataclass
class AuditReport:
    horizon: int
    slots: dict
    totals: dict
    falsifications: dict
    final: dict
    combinatorial_table: list
    ok: bool

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "horizon": self.horizon, "slots": self.slots,
                "totals": self.totals, "falsifications": self.falsifications,
                "final": self.final, "combinatorial_table": self.combinatorial_table, "ok": self.ok}


def audit_stream(records: list, budget: ConstantBudget, b: float, omega: tuple,
                 R_max_table: int = 100, table_r_delta: Optional[int] = None,
                 table_kappa_bar: Optional[float] = None) -> AuditReport:
    parts = split_stream(records)
    elements = parts["element"]
    steps = sorted(parts["step"], key=lambda s: s["n"])
    if not steps:
        raise GrammarError("no step records")
    n = steps[-1]["n"]
    kb, rd, tau = budget.kappa_bar, budget.r_delta, budget.tau
    per_step = defaultdict(list)
    for r in elements:
        per_step[(r["n"], r["slot"])].append(r)
    last = [r for r in elements if r["n"] == n]
    slot_omega = {0: omega}
    for s in parts["slot"]:
        slot_omega[s["slot"]] = (s["lo"], s["hi"])
    slots = {}
    counts = defaultdict(int)
    for f in parts["falsification"]:
        counts[f["kind"]] += 1
    for sid in sorted(slot_omega):
        om = slot_omega[sid]
        ch = build_renorm_chain(last, sid, om, n)
        met = metric_bound_check(ch, kb)
        l4 = nesting_check([r for r in elements if r["slot"] == sid], kb)
        com = combinatorial_bound_check(ch, kb, rd)
        avg = average_recurrence(ch, kb, rd)
        cheb = chebyshev_exclusion(steps, per_step, sid, om[1] - om[0], tau, kb, rd)
        slots[str(sid)] = {"omega": list(om), "levels": [len(l) for l in ch.levels],
                           "metric": met, "nesting": l4, "combinatorial": com,
                           "average": avg, "chebyshev": cheb, "renewal": escape_renewal(ch)}
        counts["metric"] += met["violations"]
        counts["combinatorial"] += com["violations"]
        counts["average"] += int(avg["margin"] < -1e-12) + avg["level_violations"]
        counts["chebyshev"] += sum(1 for c in cheb if not c["pass"])
    theta = budget.theta_for(b)
    final = final_measure_chain(steps, omega[1] - omega[0], budget.N, tau, kb, theta, budget.rho)
    counts["final_chain"] += int(not final["identity"]) + int(not final["chain_ok"])
    # recompute the inline totals from the element records
    excluded = IntervalSet((r["lo"], r["hi"]) for r in elements if r["status"] != "active")
    retained = IntervalSet([omega]).minus(excluded).measure()
    inline = steps[-1]["retained_measure"]
    totals = {"retained_recomputed": retained, "retained_inline": inline,
              "relative_difference": abs(retained - inline) / (omega[1] - omega[0]),
              "excluded_inline": float(sum(s["excluded_measure"] for s in steps))}
    table = analytic_combinatorial_table(table_r_delta or rd, table_kappa_bar or kb, R_max_table)
    ok = all(v == 0 for v in counts.values())
    return AuditReport(n, slots, totals, dict(counts), final, table, ok)
