import json
import math

import numpy as np
import pytest

from ouflow import verify_cli as vc


AUTO = {
    "dim": 1,
    "A": {"kind": "constant", "value": [[-1.0]]},
    "B": {"kind": "constant", "value": [[1.4142135623730951]]},
    "f": {"kind": "constant", "value": [0.0]},
}


def cfg_with_suite(**suite):
    cfg = dict(AUTO)
    cfg["suite"] = suite
    return json.dumps(cfg)


def test_single_check_report():
    cfg = vc.SuiteConfig.from_text(cfg_with_suite(checks=["fourier-identity"], seed=5))
    rep = vc.run_suite(cfg)
    assert len(rep.results) == 1
    assert rep.results[0].name == "fourier-identity"
    assert rep.results[0].passed


def test_unknown_check_rejected():
    cfg = vc.SuiteConfig.from_text(cfg_with_suite(checks=["no-such-check"]))
    with pytest.raises(KeyError, match="no-such-check"):
        vc.run_suite(cfg)


def test_zero_tolerance_fails_but_report_complete():
    names = ["fourier-identity", "evolution-law", "closed-form-benchmark"]
    cfg = vc.SuiteConfig.from_text(cfg_with_suite(
        checks=names, seed=5, tolerances={n: 0.0 for n in names}))
    rep = vc.run_suite(cfg)
    assert len(rep.results) == len(names)
    assert all(not r.passed for r in rep.results)
    assert not rep.all_passed


def test_failing_check_never_masks_others():
    names = ["perturbed-detector", "fourier-identity"]
    cfg = vc.SuiteConfig.from_text(cfg_with_suite(
        checks=names, seed=5, tolerances={"perturbed-detector": math.inf}))
    rep = vc.run_suite(cfg)
    assert [r.name for r in rep.results] == sorted(names)
    by_name = {r.name: r for r in rep.results}
    assert not by_name["perturbed-detector"].passed
    assert by_name["fourier-identity"].passed


def test_default_suite_passes_on_autonomous_benchmark():
    cfg = vc.SuiteConfig.from_text(cfg_with_suite(seed=11))
    rep = vc.run_suite(cfg)
    failed = [r.name for r in rep.results if not r.passed]
    assert rep.all_passed, f"failing checks: {failed}"
    assert len(rep.results) == len(vc.CHECKS)


def test_report_reproducible_across_workers():
    checks = ["fourier-identity", "evolution-law", "qinv-shape", "semigroup-law"]
    cfg1 = vc.SuiteConfig.from_text(cfg_with_suite(checks=checks, seed=9))
    cfg2 = vc.SuiteConfig.from_text(cfg_with_suite(checks=checks, seed=9, workers=3))
    rows1 = list(vc.run_suite(cfg1).csv_rows())
    rows2 = list(vc.run_suite(cfg2).csv_rows())
    assert rows1 == rows2


def test_verify_cli_end_to_end(tmp_path):
    cfgp = tmp_path / "auto.json"
    cfgp.write_text(cfg_with_suite(checks=["fourier-identity", "semigroup-law"], seed=3))
    out = tmp_path / "out"
    code = vc.main(["verify", "--config", str(cfgp), "--out", str(out), "--no-figures"])
    assert code == 0
    text = (out / "report.csv").read_text()
    assert text.splitlines()[0] == "name,value,tolerance,passed"
    assert (out / "report.txt").exists()


def test_verify_exit_nonzero_on_failure(tmp_path):
    cfgp = tmp_path / "auto.json"
    cfgp.write_text(cfg_with_suite(checks=["fourier-identity"], seed=3,
                                   tolerances={"fourier-identity": 0.0}))
    code = vc.main(["verify", "--config", str(cfgp), "--out",
                    str(tmp_path / "o"), "--no-figures"])
    assert code == 1


def test_unknown_subcommand_usage_error():
    assert vc.main(["frobnicate"]) == 2


def test_config_error_exit(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dim": 1, "A": {"kind": "constant", "value": [[-1.0]]},
                               "B": {"kind": "constant", "value": [[1.0, 0.0]]},
                               "f": {"kind": "constant", "value": [0.0]}}))
    code = vc.main(["dump-moments", "--config", str(bad), "--t-grid", "0:1:3",
                    "--out", str(tmp_path / "o"), "--no-figures"])
    assert code == 2


def test_mc_subcommand(tmp_path):
    cfgp = tmp_path / "auto.json"
    cfgp.write_text(json.dumps(AUTO))
    out = tmp_path / "out"
    code = vc.main(["mc", "--config", str(cfgp), "--s", "0", "--t", "1",
                    "--x", "0.0", "--phi", "poly:0,1", "--paths", "2000",
                    "--dt", "0.01", "--seed", "4", "--out", str(out),
                    "--no-figures"])
    assert code == 0
    lines = (out / "mc.csv").read_text().splitlines()
    assert lines[0] == "mean,stderr,dt,paths"
    mean = float(lines[1].split(",")[0])
    assert abs(mean) < 0.2


def test_propagate_subcommand(tmp_path):
    cfgp = tmp_path / "auto.json"
    cfgp.write_text(json.dumps(AUTO))
    out = tmp_path / "out"
    code = vc.main(["propagate", "--config", str(cfgp), "--s", "0", "--t", "1",
                    "--phi", "poly:0,1", "--x-grid=-1:1:5",
                    "--out", str(out), "--no-figures"])
    assert code == 0
    lines = (out / "propagate.csv").read_text().splitlines()
    assert lines[0] == "x,value_re,value_im,error_estimate"
    row = lines[3].split(",")  # x = 0
    assert abs(float(row[1])) < 1e-10


def test_dump_evolution_subcommand(tmp_path):
    cfgp = tmp_path / "auto.json"
    cfgp.write_text(json.dumps(AUTO))
    out = tmp_path / "out"
    code = vc.main(["dump-evolution", "--config", str(cfgp), "--window", "0:5",
                    "--pairs", "12", "--out", str(out), "--no-figures"])
    assert code == 0
    lines = (out / "evolution.csv").read_text().splitlines()
    assert lines[0] == "s,t,norm"
    assert len(lines) == 13
    s, t, nrm = (float(v) for v in lines[1].split(","))
    assert nrm == pytest.approx(math.exp(-(t - s)), rel=1e-10)


def test_solve_and_measures_subcommands(tmp_path):
    cfgp = tmp_path / "auto.json"
    cfgp.write_text(json.dumps(AUTO))
    out = tmp_path / "out"
    code = vc.main(["solve", "--config", str(cfgp), "--t1", "0", "--t2", "1",
                    "--phi", "trig:0.8", "--h-data", "trigexp:0.5,0.3,0.4,0.0",
                    "--nodes", "101", "--out", str(out), "--no-figures"])
    assert code == 0
    assert (out / "solve.csv").read_text().startswith("s,u_at_0_re")
    code = vc.main(["measures", "--config", str(cfgp), "--t-grid", "0:2:5",
                    "--family", "point:0.5", "--t0", "1.0",
                    "--out", str(out), "--no-figures"])
    assert code == 0
    lines = (out / "measures.csv").read_text().splitlines()
    assert lines[0] == "t,mean_0,cov_00"
    rlines = (out / "measures_residuals.csv").read_text().splitlines()
    assert rlines[0] == "s,t,residual"
    assert max(float(r.split(",")[2]) for r in rlines[1:]) < 1e-8


def test_estimate_subcommand_and_figures(tmp_path):
    cfgp = tmp_path / "auto.json"
    cfgp.write_text(json.dumps(AUTO))
    out = tmp_path / "out"
    code = vc.main(["estimate", "--config", str(cfgp), "--alpha", "1",
                    "--range", "0.06:0.5", "--points", "6",
                    "--out", str(out)])
    assert code == 0
    text = (out / "estimate.csv").read_text()
    assert text.startswith("gap,norm")
    assert "# mode=small slope=" in text
    assert (out / "estimate.png").exists()


def test_fit_smoothing_validation(auto_cache, auto_can):
    with pytest.raises(ValueError):
        vc.fit_smoothing_exponent(auto_cache, auto_can, (1,), (0.1, 0.5), points=3)
    with pytest.raises(ValueError):
        vc.fit_smoothing_exponent(auto_cache, auto_can, (1,), (0.5, 0.1))
