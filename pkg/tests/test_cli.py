import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from henonlab.cli import RunConfig, main, validate_config


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 2.0), st.floats(0, 1e-3), st.integers(1, 60), st.integers(0, 2 ** 31))
def test_config_round_trip(a, b, n, seed):
    cfg = RunConfig(mode="twod", a_min=a, b=b, n_max=n, seed=seed, alpha=0.1 / 3)
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_validate_examples():
    assert validate_config(RunConfig()) == []
    assert "kappa_alpha_order" in validate_config(RunConfig(alpha=0.5))
    assert "r_delta_integrality" in validate_config(RunConfig(delta=math.exp(-5) * 1.001))
    assert "precision_unsupported" in validate_config(RunConfig(mode="twod", precision="extended"))


def test_count_oracle(capsys):
    assert main(["count-oracle", "--R", "12", "--rdelta", "5"]) == 0
    assert capsys.readouterr().out.strip() == "4"


def test_bad_config_is_a_precondition_failure(tmp_path):
    assert main(["oned", "--alpha", "0.9", "--out", str(tmp_path)]) == 2
    assert main(["oned", "--a-min", "0.999", "--a-max", "1.0", "--out", str(tmp_path)]) == 2


def test_io_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["oned", "--samples", "64", "--out", str(blocker / "sub")]) == 4
    assert main(["audit", "--out", str(tmp_path / "missing")]) == 4


def test_oned_outputs_are_deterministic(tmp_path):
    outs = []
    for i in range(2):
        d = tmp_path / f"r{i}"
        assert main(["oned", "--samples", "1024", "--seed", "7", "--out", str(d)]) == 0
        outs.append(d)
    for name in ("events.jsonl", "measure.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    m0, m1 = (json.loads((d / "manifest.json").read_text()) for d in outs)
    assert m0["config_hash"] == m1["config_hash"] and m0["files"] == m1["files"]
    rows = (outs[0] / "measure.csv").read_text().splitlines()
    assert len(rows) == 41
    man = json.loads((outs[0] / "manifest.json").read_text())
    assert man["schema_version"] == 1 and len(man["config_hash"]) == 64


def test_config_file_with_overrides(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# a small run\nsamples=512\nn_max=20\n")
    assert main(["oned", "--config", str(f), "--n-max", "25", "--out", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "measure.csv").read_text().splitlines()) == 26


def test_frames_workers_do_not_change_results(tmp_path):
    for w in (1, 2):
        assert main(["frames", "--samples", "6", "--workers", str(w), "--out", str(tmp_path / f"w{w}")]) == 0
    assert (tmp_path / "w1" / "events.jsonl").read_bytes() == (tmp_path / "w2" / "events.jsonl").read_bytes()
