"""Batch command line: configuration, orchestration and serialization.

    henonlab oned   [--config FILE] [--key value ...]
    henonlab twod   ...
    henonlab frames ...
    henonlab audit  --out DIR          (replays DIR/events.jsonl)
    henonlab count-oracle --R 12 --rdelta 5

Exit codes: 0 clean, 2 precondition failed, 3 falsification, 4 I/O error.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import dataclasses
import hashlib
import json
import math
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .audit import audit_stream, count_compositions
from .extended import SCHEMA_VERSION, ExtendedEngine, TwoDConfig
from .family import ConstantBudget, OrbitEscape, ParameterPoint, orbit_extended
from .frames import UndefinedFrame, accumulate
from .onedim import ExactEngine1D, SampledEngine1D, StartupError, verify_retained_1d
from .recurrence import check_EG

EXIT_OK, EXIT_PRECONDITION, EXIT_FALSIFIED, EXIT_IO = 0, 2, 3, 4
MODES = ("oned", "twod", "frames", "audit", "count-oracle")

# per-mode defaults; anything left as None in a RunConfig takes these
MODE_DEFAULTS = {
    "oned": dict(a_min=1.99, a_max=2.0, b=0.0, alpha=0.05, n_max=40, big_n=15,
                 engine="sampled", samples=2 ** 18),
    "twod": dict(a_min=2 - 2 ** -17, a_max=2 - 2 ** -17 + 2 ** -24, b=1e-6, alpha=0.02,
                 n_max=24, big_n=9),
    "frames": dict(a_min=1.99, a_max=2.0, b=1e-6, alpha=0.02, n_max=8, big_n=15, samples=16),
    "audit": dict(a_min=2 - 2 ** -17, a_max=2 - 2 ** -17 + 2 ** -24, b=1e-6, alpha=0.02,
                  n_max=24, big_n=9),
    "count-oracle": dict(a_min=1.99, a_max=2.0, b=0.0, alpha=0.02, n_max=1, big_n=15),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "oned"
    a_min: Optional[float] = None
    a_max: Optional[float] = None
    b: Optional[float] = None
    delta: float = math.exp(-5)
    alpha: Optional[float] = None
    kappa: float = 0.4
    tau: Optional[float] = None
    rho: float = 1.6e-5
    n_max: Optional[int] = None
    big_n: Optional[int] = None
    seed: int = 0
    workers: int = 1
    out: str = "runs/out"
    precision: str = "double"
    engine: str = "sampled"
    samples: Optional[int] = None

    def resolved(self) -> "RunConfig":
        d = MODE_DEFAULTS.get(self.mode, {})
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in d.items():
            if kw.get(k) is None:
                kw[k] = v
        if kw["samples"] is None:
            kw["samples"] = 2 ** 14
        return RunConfig(**kw)

    def budget(self) -> ConstantBudget:
        c = self.resolved()
        return ConstantBudget.make(kappa=c.kappa, alpha=c.alpha, delta=c.delta, rho=c.rho,
                                   N=c.big_n, tau=c.tau)

    # key=value text; floats go through repr so the round trip is exact
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'' if v is None else repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"not a key=value line: {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            kw[k.replace("-", "_")] = v
        return cls.from_strings(kw)

    @classmethod
    def from_strings(cls, kw: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in kw.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            t = types[k]
            if v is None or v == "":
                out[k] = None
            elif "float" in t:
                out[k] = float(v)
            elif "int" in t:
                out[k] = int(v)
            else:
                out[k] = str(v)
        return cls(**out)

    def digest(self) -> str:
        """Hash of everything that can change results (not the output path or worker count)."""
        c = dataclasses.replace(self.resolved(), out="", workers=1)
        return hashlib.sha256(c.to_text().encode()).hexdigest()


def validate_config(cfg: RunConfig) -> list[str]:
    c = cfg.resolved()
    out = []
    if c.mode not in MODES:
        out.append("mode_unknown")
        return out
    out.extend(c.budget().validate())
    if not c.a_min < c.a_max:
        out.append("omega_empty")
    if c.b < 0:
        out.append("b_negative")
    if c.n_max < 1:
        out.append("n_max_positive")
    if c.workers < 1:
        out.append("workers_positive")
    if c.precision not in ("double", "extended"):
        out.append("precision_unknown")
    elif c.precision == "extended" and c.mode != "frames":
        out.append("precision_unsupported")
    if c.engine not in ("sampled", "exact"):
        out.append("engine_unknown")
    if c.samples < 1:
        out.append("samples_positive")
    return out


# ---------------------------------------------------------------------------
# writers

def _dump(rec: dict) -> str:
    return json.dumps(rec, allow_nan=True)


def write_events(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(_dump(r) + "\n")


def read_events(path: Path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: RunConfig, extra: dict) -> dict:
    import mpmath

    files = {p.name: _sha(p) for p in sorted(out.iterdir())
             if p.is_file() and p.name not in ("manifest.json", "config.txt")}
    man = {"schema_version": SCHEMA_VERSION, "config": dataclasses.asdict(cfg.resolved()),
           "config_hash": cfg.digest(),
           "versions": {"henonlab": __version__, "python": platform.python_version(),
                        "numpy": np.__version__, "mpmath": mpmath.__version__},
           "files": files}
    man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=1) + "\n")
    return man


def _measure_csv(rows: list) -> str:
    head = "k,retained_measure,excluded_measure,active_interval_count,max_depth\n"
    return head + "".join(f"{r['k']},{r['retained_measure']!r},{r['excluded_measure']!r},"
                          f"{r['active_interval_count']},{r['max_depth']}\n" for r in rows)


def binding_fit(measurements: list) -> dict:
    """Least-squares slope of p against |log d| with its standard error."""
    if len(measurements) < 3:
        return {"count": len(measurements), "slope": None, "stderr": None}
    x = np.array([m[1] for m in measurements])
    y = np.array([m[2] for m in measurements], dtype=float)
    A = np.column_stack([x, np.ones_like(x)])
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    s2 = float(resid @ resid) / max(len(x) - 2, 1)
    cov = s2 * np.linalg.inv(A.T @ A)
    return {"count": len(x), "slope": float(coef[0]), "intercept": float(coef[1]),
            "stderr": float(math.sqrt(cov[0, 0]))}


def calibration_window(fit: dict) -> Optional[list]:
    """Window for later runs: slope +- (3 standard errors + 10% of the slope).

    The relative part absorbs the dependence of the slope on where Omega sits
    (how long critical orbits linger near the fixed point).
    """
    if fit.get("slope") is None:
        return None
    w = 3 * fit["stderr"] + 0.1 * abs(fit["slope"])
    return [fit["slope"] - w, fit["slope"] + w]


# ---------------------------------------------------------------------------
# modes

def run_oned(cfg: RunConfig, out: Path) -> int:
    c = cfg.resolved()
    budget = c.budget()
    events = []
    if c.engine == "exact":
        eng = ExactEngine1D(c.a_min, c.a_max, budget, rule="star",
                            log=lambda r: events.append({"schema_version": SCHEMA_VERSION,
                                                         "type": "log", **r}))
        led = eng.run(c.n_max)
        for g in sorted(eng.active + eng.excluded, key=lambda g: g.lo):
            events.append({"schema_version": SCHEMA_VERSION, "type": "element", **g.to_json()})
        problems = eng.check_partition() + led.check()
        summary = {"retained_fraction": led.rows[-1]["retained_measure"] / (c.a_max - c.a_min)}
    else:
        eng = SampledEngine1D(c.a_min, c.a_max, budget, samples=c.samples)
        led = eng.run(c.n_max)
        rng = np.random.default_rng(c.seed)
        retained = np.nonzero(eng.alive)[0]
        pick = rng.choice(retained, size=min(100, len(retained)), replace=False) if len(retained) else []
        failed = [int(i) for i in pick if not verify_retained_1d(float(eng.a[i]), c.n_max, 0.1)]
        problems = led.check() + [f"sample {i} retained but not expanding" for i in failed]
        for row in led.rows:
            k = row["k"]
            events.append({"schema_version": SCHEMA_VERSION, "type": "step", **row,
                           "excluded_samples": int(np.sum(eng.excluded_at == k))})
        frac = led.rows[-1]["retained_measure"] / (c.a_max - c.a_min)
        summary = {"retained_fraction": frac, "verified_samples": len(pick),
                   "verify_failures": len(failed),
                   "decay_slope": led.fitted_decay(budget.N)}
    for p in problems:
        events.append({"schema_version": SCHEMA_VERSION, "type": "falsification", "kind": "ledger",
                       "detail": p})
    write_events(out / "events.jsonl", events)
    (out / "measure.csv").write_text(_measure_csv(led.rows))
    write_manifest(out, cfg, {"summary": summary})
    print(json.dumps(summary))
    return EXIT_FALSIFIED if problems else EXIT_OK


def run_twod(cfg: RunConfig, out: Path) -> int:
    c = cfg.resolved()
    budget = c.budget()
    eng = ExtendedEngine(TwoDConfig(c.a_min, c.a_max, c.b, horizon=c.n_max), budget)
    records = eng.run()
    write_events(out / "events.jsonl", records)
    rows = []
    by_n: dict = {}
    for r in records:
        if r["type"] == "element":
            by_n[r["n"]] = max(by_n.get(r["n"], 0), abs(r["r"]))
    for s in eng.step_rows:
        rows.append({"k": s["n"], "retained_measure": s["retained_measure"],
                     "excluded_measure": s["excluded_measure"],
                     "active_interval_count": s["active"], "max_depth": by_n.get(s["n"], 0)})
    (out / "measure.csv").write_text(_measure_csv(rows))
    report = audit_stream(records, budget, c.b, (c.a_min, c.a_max))
    audit = report.to_json()
    audit["engine_falsifications"] = len(eng.falsifications)
    (out / "audit.json").write_text(json.dumps(audit, indent=1) + "\n")
    fit = binding_fit(eng.measurements["binding"])
    write_manifest(out, cfg, {"binding_fit": fit, "calibration_window": calibration_window(fit),
                              "summary": {"retained_fraction": report.final["retained_fraction"],
                                          "engine_falsifications": len(eng.falsifications),
                                          "audit_falsifications": report.falsifications}})
    print(json.dumps({"retained_fraction": report.final["retained_fraction"],
                      "engine_falsifications": len(eng.falsifications),
                      "audit_ok": report.ok, "binding_slope": fit["slope"]}))
    return EXIT_OK if report.ok and not eng.falsifications else EXIT_FALSIFIED


def _frames_one(args) -> dict:
    a, b, z0, k, kappa, extended = args
    p = ParameterPoint(a, b)
    rec = {"schema_version": SCHEMA_VERSION, "type": "frames", "a": a, "b": b}
    try:
        h = accumulate(p, z0, k + 1)
        rec["theta"] = [h.theta(j) for j in range(1, k + 1)]
        rec["log_expansion"] = [float(v) for v in h.log_s1[1:k + 1]]
        eg = check_EG(p, np.asarray(z0), np.array([1.0, 0.0]), k, kappa, points=h.points)
        rec["eg_ok"], rec["eg_margin"] = bool(eg.ok), float(eg.min_margin)
        if extended:
            ext = orbit_extended(a, b, z0, k + 1)
            rec["orbit_deviation"] = max(float(abs(float(ex) - pt[0]) + abs(float(ey) - pt[1]))
                                         for (ex, ey), pt in zip(ext, h.points))
    except (UndefinedFrame, OrbitEscape) as exc:
        rec["error"] = str(exc)
    return rec


def run_frames(cfg: RunConfig, out: Path) -> int:
    c = cfg.resolved()
    rng = np.random.default_rng(c.seed)
    avals = np.sort(rng.uniform(c.a_min, c.a_max, size=c.samples))
    jobs = [(float(a), c.b, (1.0, 0.0), c.n_max, c.kappa, c.precision == "extended") for a in avals]
    if c.workers > 1:
        with cf.ProcessPoolExecutor(c.workers) as ex:
            recs = list(ex.map(_frames_one, jobs))
    else:
        recs = [_frames_one(j) for j in jobs]
    write_events(out / "events.jsonl", recs)
    write_manifest(out, cfg, {"summary": {"samples": len(recs),
                                          "errors": sum(1 for r in recs if "error" in r)}})
    return EXIT_OK


def run_audit(cfg: RunConfig, out: Path) -> int:
    c = cfg.resolved()
    records = read_events(out / "events.jsonl")
    report = audit_stream(records, c.budget(), c.b, (c.a_min, c.a_max))
    (out / "audit.json").write_text(json.dumps(report.to_json(), indent=1) + "\n")
    print(json.dumps({"ok": report.ok, "falsifications": report.falsifications}))
    return EXIT_OK if report.ok else EXIT_FALSIFIED


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="henonlab", description="Parameter exclusion experiments")
    sub = ap.add_subparsers(dest="mode", required=True)
    for m in MODES:
        sp = sub.add_parser(m)
        if m == "count-oracle":
            sp.add_argument("--R", type=int, required=True)
            sp.add_argument("--rdelta", type=int, required=True)
            continue
        sp.add_argument("--config", help="key=value file; flags override it")
        for f in fields(RunConfig):
            if f.name == "mode":
                continue
            sp.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None)
    return ap


def config_from_args(ns) -> RunConfig:
    kw = {}
    if ns.config:
        base = RunConfig.from_text(Path(ns.config).read_text())
        kw = {f.name: getattr(base, f.name) for f in fields(base)}
    kw["mode"] = ns.mode
    for f in fields(RunConfig):
        v = getattr(ns, f.name, None)
        if f.name != "mode" and v is not None:
            kw[f.name] = RunConfig.from_strings({f.name: v}).__dict__[f.name]
    return RunConfig(**kw)


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    if ns.mode == "count-oracle":
        print(count_compositions(ns.R, ns.rdelta))
        return EXIT_OK
    try:
        cfg = config_from_args(ns)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    problems = validate_config(cfg)
    if problems:
        print("config violations: " + ", ".join(problems), file=sys.stderr)
        return EXIT_PRECONDITION
    out = Path(cfg.resolved().out)
    runner = {"oned": run_oned, "twod": run_twod, "frames": run_frames, "audit": run_audit}[cfg.mode]
    try:
        if cfg.mode != "audit":
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(cfg.resolved().to_text())
        return runner(cfg, out)
    except StartupError as exc:
        print(f"startup assertion failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
