import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from conftest import APPROACH_C_3Y, CRUDE, STUDIES
from ipdsurv.cli import EXIT_INVALID, EXIT_MISSING, EXIT_NUMERICAL, EXIT_OK, RunConfig, main
from ipdsurv.errors import DataError

SIM = {
    "output": "out",
    "input": "out/data.csv",
    "seed": 11,
    "times": [12, 24],
    "hr_windows": [24],
    "uncertainty": {"method": "delta"},
    "simulate": {"n": [80, 90, 70], "psi": [-0.5, -0.2, -0.4], "scale": [30, 40, 50],
                 "censor_rate": 0.01, "tau": [50, 60, 70]},
}


def write_config(root: Path, **changes) -> Path:
    cfg = {**SIM, **changes}
    p = root / "run.yaml"
    p.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return p


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def last_json(text: str) -> dict:
    return json.loads(text.strip().splitlines()[-1])


def run_pipeline(root, capsys, **changes):
    cfg = write_config(root, **changes)
    assert main(["simulate", "-c", str(cfg)]) == EXIT_OK
    assert main(["run", "-c", str(cfg)]) == EXIT_OK
    return cfg, last_json(capsys.readouterr().out)


def test_full_pipeline(tmp_path, capsys):
    cfg, report = run_pipeline(tmp_path, capsys)
    out = tmp_path / "out"
    for name in ("validation.json", "describe.csv", "model.json", "curves.json", "contrasts.csv",
                 "pooled.json", "forest.txt", "forest_risk_difference.svg"):
        assert (out / name).is_file(), name
    assert "forest_risk_difference.svg" in report["outputs"]
    pooled = json.loads((out / "pooled.json").read_text())
    prov = pooled["provenance"]
    assert prov["config_hash"] == report["config_hash"] and prov["model_hash"]
    key = next(k for k in pooled["estimands"] if k.startswith("risk_difference[A]@24"))
    res = pooled["estimands"][key]["result"]
    assert res["k"] == 3 and res["ci95"][0] < res["pooled"] < res["ci95"][1]
    # every artifact carries provenance
    assert (out / "contrasts.csv").read_text().startswith("# config_hash=" + prov["config_hash"])
    assert f"config_hash={prov['config_hash']}" in (out / "forest_risk_difference.svg").read_text()
    # a single command reproduces its own table
    before = (out / "contrasts.csv").read_bytes()
    assert main(["contrast", "-c", str(cfg)]) == EXIT_OK
    assert (out / "contrasts.csv").read_bytes() == before


def test_two_runs_are_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    run_pipeline(a, capsys)
    run_pipeline(b, capsys)
    assert tree(a / "out") == tree(b / "out")


def test_jackknife_jobs_do_not_change_outputs(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    jk = {"method": "jackknife"}
    small = {"n": [40, 50], "psi": [-0.5, -0.2], "censor_rate": 0.01, "tau": [50, 60]}
    run_pipeline(a, capsys, uncertainty=jk, simulate=small, approaches=["A", "C"])
    cfg = write_config(b, uncertainty=jk, simulate=small, approaches=["A", "C"])
    assert main(["simulate", "-c", str(cfg)]) == EXIT_OK
    assert main(["run", "-c", str(cfg), "--jobs", "2"]) == EXIT_OK
    assert tree(a / "out") == tree(b / "out")


def test_aggregate_pooling(tmp_path, capsys):
    agg = tmp_path / "table3.csv"
    rows = ["study,value,lo,hi,scale,estimand"]
    rows += [f"{s},{v},{lo},{hi},log,crude" for s, (v, lo, hi) in zip(STUDIES, CRUDE)]
    rows += [f"{s},{v},{lo},{hi},log,approach_c_36" for s, (v, lo, hi) in zip(STUDIES, APPROACH_C_3Y)]
    agg.write_text("\n".join(rows) + "\n")
    out = tmp_path / "agg"
    assert main(["pool", "--aggregate", str(agg), "-o", str(out)]) == EXIT_OK
    doc = json.loads((out / "pooled.json").read_text())
    crude = doc["estimands"]["crude"]["result"]["display"]
    assert crude["pooled"] == pytest.approx(0.39, abs=0.03)
    np.testing.assert_allclose(crude["ci95"], [0.18, 0.84], atol=0.06)
    c = doc["estimands"]["approach_c_36"]["result"]["display"]
    assert c["pooled"] == pytest.approx(0.79, abs=0.03)
    np.testing.assert_allclose(c["ci95"], [0.66, 0.94], atol=0.06)
    assert main(["forest", "-o", str(out)]) == EXIT_OK
    assert (out / "forest_crude.svg").is_file() and (out / "forest_approach_c_36.svg").is_file()


def test_ordering_contract(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["simulate", "-c", str(cfg)]) == EXIT_OK
    capsys.readouterr()
    assert main(["standardize", "-c", str(cfg)]) == EXIT_MISSING
    err = json.loads(capsys.readouterr().err.strip())
    assert err["exit_code"] == EXIT_MISSING and err["command"] == "standardize" and "fit" in err["message"]
    assert main(["pool", "--aggregate", str(tmp_path / "nope.csv"), "-o", str(tmp_path / "x")]) == EXIT_MISSING
    # a model made under another config is stale
    assert main(["fit", "-c", str(cfg)]) == EXIT_OK
    assert main(["standardize", "-c", str(cfg), "--times", "6"]) == EXIT_MISSING


def test_validation_errors(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["simulate", "-c", str(cfg)]) == EXIT_OK
    assert main(["validate", "-c", str(cfg), "--set", "no_such_key=1"]) == EXIT_INVALID
    assert main(["validate", "-c", str(cfg), "--times", "-3"]) == EXIT_INVALID
    assert main(["validate", "-c", str(cfg), "--approaches", "Q"]) == EXIT_INVALID
    bad = tmp_path / "bad.csv"
    bad.write_text("id,study,exposure,time,event\n1,A,0,-1,1\n")
    assert main(["validate", "-i", str(bad), "-o", str(tmp_path / "v")]) == EXIT_INVALID
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "DataError" and "line 2" in err["message"]


def test_numerical_failure_exit_code(tmp_path, capsys):
    data = tmp_path / "noevents.csv"
    lines = ["id,study,exposure,time,event,z"]
    lines += [f"{i},A,{i % 2},{1 + i},1,{i / 10}" for i in range(20)]
    lines += [f"{i},B,{i % 2},{1 + i},0,{i / 10}" for i in range(20, 40)]
    data.write_text("\n".join(lines) + "\n")
    assert main(["fit", "-i", str(data), "-o", str(tmp_path / "f")]) == EXIT_NUMERICAL
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == EXIT_NUMERICAL and "no events" in err["message"]


def test_overrides_and_config_hash(tmp_path):
    cfg = RunConfig.from_dict({"input": "x.csv", "times": [12, 24]})
    same = RunConfig.from_dict({"input": "elsewhere.csv", "times": [12, 24], "jobs": 8, "output": "o"})
    assert cfg.hash == same.hash
    assert RunConfig.from_dict({"input": "x.csv", "times": [12, 36]}).hash != cfg.hash
    with pytest.raises(DataError, match="bogus"):
        RunConfig.from_dict({"input": "x.csv", "bogus": 1})
    p = write_config(tmp_path)
    assert main(["simulate", "-c", str(p)]) == EXIT_OK
    assert main(["censor", "-c", str(p), "--censor-tau", "30", "-o", str(tmp_path / "cens")]) == EXIT_OK
    text = (tmp_path / "cens" / "censored.csv").read_text()
    times = [float(r.split(",")[3]) for r in text.splitlines() if r and not r.startswith(("#", "id"))]
    assert max(times) <= 30
    assert main(["describe", "-c", str(p), "--set", "follow_up=raw", "-o", str(tmp_path / "d")]) == EXIT_OK
    assert (tmp_path / "d" / "describe.csv").is_file()
