"""One test per acceptance criterion; each prints a PASS/FAIL line with its measurement."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from henonlab.audit import count_compositions
from henonlab.cli import main, read_events
from henonlab.extended import ExtendedEngine, TwoDConfig
from henonlab.family import (ConstantBudget, ParameterPoint, derivative_along_orbit_1d, jacobian_batch,
                             orbit, orbit_1d)
from henonlab.frames import accumulate, contracted_angle
from henonlab.onedim import ExactEngine1D, SampledEngine1D, verify_retained_1d
from henonlab.recurrence import check_EG, ledger_1d

from test_audit import enumerate_compositions

CALIBRATION = Path(__file__).parent / "data" / "calibration" / "manifest.json"


# 1 ---------------------------------------------------------------------------
def test_svd_oracle(report):
    rng = np.random.default_rng(2024)
    mats = []
    while len(mats) < 1000:
        M = rng.normal(size=(2, 2))
        s = np.linalg.svd(M, compute_uv=False)
        if s[0] / s[1] > 1.01:
            mats.append(M)
    t0 = time.perf_counter()
    worst = 0.0
    for M in mats:
        t = contracted_angle(M)
        e = np.array([math.sin(t), math.cos(t)])
        v = np.linalg.svd(M)[2][1]
        cross = abs(e[0] * v[1] - e[1] * v[0])
        worst = max(worst, math.atan2(cross, abs(float(e @ v))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-8 and dt < 1.0
    report(1, ok, f"max angle to SVD right vector {worst:.2e} rad over 1000 matrices, {dt:.2f} s")
    assert ok


# 2 ---------------------------------------------------------------------------
def test_determinant_and_degeneration(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    Z = rng.uniform(-2, 2, size=(10 ** 6, 2))
    worst = 0.0
    for b in (1e-4, 1e-6):
        det = np.linalg.det(jacobian_batch(ParameterPoint(1.97, b), Z))
        worst = max(worst, float(np.max(np.abs(det + b))))
    p0 = ParameterPoint(1.97, 0.0)
    pts = orbit(p0, (0.2, 0.0), 200)
    exact = bool(np.array_equal(pts[:, 0], orbit_1d(1.97, 0.2, 200)) and not pts[:, 1].any())
    dt = time.perf_counter() - t0
    ok = worst <= 1e-14 and exact and dt < 5
    report(2, ok, f"max |det + b| {worst:.1e} at 10^6 points; b=0 orbit equals 1D orbit: {exact}; {dt:.2f} s")
    assert ok


# 3 ---------------------------------------------------------------------------
def test_critical_derivative_is_power_of_four(report):
    p = ParameterPoint(2.0, 0.0)
    res = check_EG(p, np.array([1.0, 0.0]), np.array([1.0, 0.0]), 25, 0.0)
    x, d = 1, 1
    exact, worst = True, 0.0
    for j in range(1, 26):
        d *= abs(4 * x)        # integer derivative of x -> 1 - 2x^2
        x = 1 - 2 * x * x
        exact &= d == 4 ** j and derivative_along_orbit_1d(p, 1.0, j) == d
        worst = max(worst, abs(res.margins[j] - math.log(d)) / math.log(d))
    ok = exact and worst < 1e-14
    report(3, ok, f"derivative along the critical orbit equals 4^n exactly for n <= 25: {exact}; "
                  f"EG log-growth vs n log 4, worst relative error {worst:.1e}")
    assert ok


# 4 ---------------------------------------------------------------------------
def test_angle_decay(report):
    t0 = time.perf_counter()
    kappa = ConstantBudget().kappa
    lines, ok = [], True
    for b in (1e-4, 1e-5, 1e-6):
        used = 0
        worst = -math.inf
        for a in np.linspace(1.99, 1.9995, 12):
            p = ParameterPoint(float(a), b)
            try:
                h = accumulate(p, (1.0, 0.0), 9)
            except Exception:
                continue
            if not check_EG(p, np.array([1.0, 0.0]), np.array([1.0, 0.0]), 9, kappa, points=h.points).ok:
                continue
            th = np.array([h.theta(k) for k in range(1, 9)])
            slope = float(np.polyfit(np.arange(1, 9), np.log(th), 1)[0])
            worst = max(worst, slope - math.log(b))
            used += 1
        good = used > 0 and worst <= 0.5
        ok &= good
        lines.append(f"b={b:g}: {used} EG orbits, max slope - log b = {worst:.3f}")
    dt = time.perf_counter() - t0
    ok &= dt < 30
    report(4, ok, "; ".join(lines) + f"; {dt:.1f} s")
    assert ok


# 5 ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def headline():
    bud = ConstantBudget.make(alpha=0.05, N=15)
    eng = SampledEngine1D(1.99, 2.0, bud, samples=2 ** 18)
    t0 = time.perf_counter()
    eng.run(40)
    return bud, eng, time.perf_counter() - t0


def test_1d_headline_retained(report, headline):
    bud, eng, dt = headline
    frac = eng.ledger.rows[-1]["retained_measure"] / 0.01
    ok = frac >= 0.5
    report("5(i)", ok, f"retained fraction {frac:.4f} after 40 steps ({dt:.1f} s)")
    assert ok


def test_1d_headline_decay_slope(report, headline):
    bud, eng, _ = headline
    slope = eng.ledger.fitted_decay(bud.N)
    ok = slope <= -0.05
    report("5(ii)", ok, f"fitted slope of log excluded fraction vs k = {slope:.4f} (need <= -0.05)")
    assert ok


def test_1d_headline_retained_expand(report, headline):
    bud, eng, _ = headline
    rng = np.random.default_rng(5)
    idx = rng.choice(np.nonzero(eng.alive)[0], size=100, replace=False)
    bad = [i for i in idx if not verify_retained_1d(float(eng.a[i]), 40, 0.1)]
    ok = not bad
    report("5(iii)", ok, f"{100 - len(bad)}/100 retained samples have |D phi^j(1)| >= e^(0.1 j), j <= 40")
    assert ok


def test_1d_headline_excluded_fail_star(report, headline):
    bud, eng, _ = headline
    rng = np.random.default_rng(6)
    excl = np.nonzero(eng.excluded_at)[0]
    idx = rng.choice(excl, size=min(100, len(excl)), replace=False)
    bad = []
    for i in idx:
        k = int(eng.excluded_at[i])
        led = ledger_1d(float(eng.a[i]), k, bud.delta, 0.05, extra=120)
        if not led.star_sum_until(k) > 0.05 * k:
            bad.append(int(i))
    ok = not bad
    report("5(iv)", ok, f"{len(idx) - len(bad)}/{len(idx)} excluded samples violate (*) at their exclusion time")
    assert ok


# 6 ---------------------------------------------------------------------------
def test_zero_b_equivalence(report):
    bud = ConstantBudget.make()
    lo, hi = 2 - 2 ** -27, 2.0
    e1 = ExactEngine1D(lo, hi, bud, rule="essential")
    e2 = ExtendedEngine(TwoDConfig(lo, hi, 0.0, horizon=25), bud)
    worst, same = 0.0, True
    for _ in range(25):
        e1.step()
        e2.step()
        A = sorted([(g.lo, g.hi) for g in e1.active] + [(g.lo, g.hi) for g in e1.excluded])
        B = sorted((r["lo"], r["hi"]) for r in e2.records
                   if r["type"] == "element" and (r["status"] != "active" or r["n"] == e2.time))
        A = np.array(A)
        B = np.array(sorted(set(B)))
        if A.shape != B.shape:
            same = False
            break
        worst = max(worst, float(np.max(np.abs(A - B))))
    ok = same and worst <= 1e-10
    report(6, ok, f"25 steps, {len(e1.active)} active / {len(e1.excluded)} excluded elements, "
                  f"worst endpoint difference {worst:.1e}")
    assert ok


# 7, 9, 10 ----------------------------------------------------------------------
@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = []
    for i in range(2):
        d = tmp_path_factory.mktemp(f"desk{i}")
        t0 = time.perf_counter()
        code = main(["twod", "--out", str(d)])
        out.append((d, code, time.perf_counter() - t0))
    return out


def test_desk_run_falsifications(report, desk):
    d, code, dt = desk[0]
    events = read_events(d / "events.jsonl")
    audit = json.loads((d / "audit.json").read_text())
    kinds = {}
    for r in events:
        if r["type"] == "falsification":
            kinds[r["kind"]] = kinds.get(r["kind"], 0) + 1
    af = audit["falsifications"]
    nesting = sum(s["nesting"]["violations"] for s in audit["slots"].values())
    parts = {
        "(a) (*) implies EG": kinds.get("star_implies_EG", 0),
        "(b) metric margins": af.get("metric", 0) + nesting,
        "(c) combinatorial margins": af.get("combinatorial", 0),
        "(d) average recurrence": af.get("average", 0),
        "(e) Chebyshev bound": af.get("chebyshev", 0) + af.get("final_chain", 0),
        "(f) set identity": kinds.get("set_identity", 0),
        "(g) slot multiplicity": kinds.get("multiplicity", 0),
        "(h) slow variation": kinds.get("slow_variation", 0),
    }
    other = {k: v for k, v in kinds.items()
             if k not in ("star_implies_EG", "set_identity", "multiplicity", "slow_variation")}
    for name, cnt in parts.items():
        report(f"7{name.split()[0]}", cnt == 0, f"{name}: {cnt} falsification events")
    ok = all(v == 0 for v in parts.values()) and not other and dt < 3600
    report(7, ok, f"desk run b=1e-6, n_max=24 in {dt:.1f} s, exit code {code}, other events {other}")
    assert ok


def test_replay_determinism(report, desk):
    (d0, _, _), (d1, _, _) = desk
    same = (d0 / "events.jsonl").read_bytes() == (d1 / "events.jsonl").read_bytes()
    inline = json.loads((d0 / "audit.json").read_text())
    code = main(["audit", "--out", str(d0)])
    replay = json.loads((d0 / "audit.json").read_text())
    t = inline["totals"]
    rel = t["relative_difference"]
    replay_same = {k: v for k, v in inline.items() if k != "engine_falsifications"} == replay
    ok = same and rel <= 1e-12 and replay_same
    report(9, ok, f"byte-identical events.jsonl: {same}; stream vs inline retained measure rel. diff {rel:.1e}; "
                  f"replayed audit identical: {replay_same} (exit {code})")
    assert ok


def test_binding_scaling(report, desk):
    d, _, _ = desk[0]
    fit = json.loads((d / "manifest.json").read_text())["binding_fit"]
    cal = json.loads(CALIBRATION.read_text())
    lo, hi = cal["calibration_window"]
    ok = fit["slope"] is not None and lo <= fit["slope"] <= hi
    report(10, ok, f"binding slope {fit['slope']:.3f} +- {fit['stderr']:.3f} over {fit['count']} returns; "
                   f"frozen window [{lo:.3f}, {hi:.3f}] from Omega=[{cal['config']['a_min']!r}, "
                   f"{cal['config']['a_max']!r}]")
    assert ok


# 8 ---------------------------------------------------------------------------
def test_counting_oracle(report):
    bad = []
    for r in (3, 5, 10):
        tally = enumerate_compositions(40, r)
        bad += [(R, r) for R in range(41) if count_compositions(R, r) != tally.get(R, 0)]
    ok = not bad and count_compositions(12, 5) == 4
    report(8, ok, f"DP equals enumeration for R <= 40, r_delta in (3, 5, 10); N(12, 5) = {count_compositions(12, 5)}")
    assert ok
