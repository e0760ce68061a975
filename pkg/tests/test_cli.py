import csv
import json

import numpy as np
import pytest
import yaml

from privutil import cli
from privutil import harness as hs

from conftest import CONFIG_DIR


def run(*argv):
    return cli.main([str(a) for a in argv])


def config_with(tmp_path, base, **changes):
    tree = yaml.safe_load((CONFIG_DIR / f"{base}.yaml").read_text())
    tree.update(changes)
    path = tmp_path / f"{tree['name']}.yaml"
    path.write_text(yaml.safe_dump(tree))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_then_verify(tmp_path):
    assert run("simulate", "--config", CONFIG_DIR / "noop.yaml", "--out", tmp_path) == 0
    run_dir = tmp_path / "noop"
    for name in ("config.yaml", "report.json", "traces.csv", "dist_O.csv", "dist_S.csv", "manifest.json"):
        assert (run_dir / name).is_file()
    assert run("verify", run_dir) == 0
    verdict = json.loads((run_dir / "verdict.json").read_text())
    assert verdict["passed"]
    names = {c["name"] for c in verdict["checks"]}
    assert {"nfl_tv", "nfl_utility", "bp_dp", "utility_tv_upper"} <= names


def test_verify_locates_run_from_config(tmp_path):
    cfg = CONFIG_DIR / "noop.yaml"
    run("simulate", "--config", cfg, "--out", tmp_path)
    assert run("verify", "--config", cfg, "--out", tmp_path) == 0


def test_runs_are_reproducible(tmp_path):
    cfg = CONFIG_DIR / "randomization_empirical.yaml"
    a, b = tmp_path / "a", tmp_path / "b"
    run("simulate", "--config", cfg, "--out", a)
    run("simulate", "--config", cfg, "--out", b)
    da, db = a / "randomization-empirical", b / "randomization-empirical"
    files = sorted(p.name for p in da.iterdir())
    assert files == sorted(p.name for p in db.iterdir())
    for name in files:
        if name != "manifest.json":
            assert (da / name).read_bytes() == (db / name).read_bytes(), name
    ma = json.loads((da / "manifest.json").read_text())
    mb = json.loads((db / "manifest.json").read_text())
    assert ma["files"] == mb["files"] and ma["config_hash"] == mb["config_hash"]


def test_seed_override_changes_results(tmp_path):
    cfg = CONFIG_DIR / "randomization_empirical.yaml"
    run("simulate", "--config", cfg, "--out", tmp_path / "a")
    run("simulate", "--config", cfg, "--out", tmp_path / "b", "--seed", 8)
    name = "randomization-empirical/report.json"
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()


def test_tampered_known_key_report_fails_verify(tmp_path):
    run("simulate", "--config", CONFIG_DIR / "toy_he.yaml", "--out", tmp_path)
    run_dir = tmp_path / "toy-he"
    assert run("verify", run_dir) == 0
    path = run_dir / "report_known_key.json"
    data = json.loads(path.read_text())
    data["eps_p"] = data["eps_p"] / 2
    path.write_text(json.dumps(data))
    assert run("verify", run_dir) == hs.EXIT_VERIFY


def test_exit_codes(tmp_path):
    assert run("verify", tmp_path / "missing") == hs.EXIT_RUN
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: -3\n")
    assert run("simulate", "--config", bad, "--out", tmp_path) == hs.EXIT_USAGE
    assert run("simulate", "--config", tmp_path / "none.yaml") == hs.EXIT_USAGE
    assert run("curve", "--config", CONFIG_DIR / "noop.yaml", "--out", tmp_path) == hs.EXIT_USAGE
    assert run("attack", "--config", CONFIG_DIR / "attacks.yaml", "--out", tmp_path) == hs.EXIT_RUN
    with pytest.raises(SystemExit) as exc:
        run("simulate", "--config", CONFIG_DIR / "noop.yaml", "--seed", "abc")
    assert exc.value.code == hs.EXIT_USAGE


def test_incomplete_run_is_a_run_failure(tmp_path):
    run("simulate", "--config", CONFIG_DIR / "noop.yaml", "--out", tmp_path)
    (tmp_path / "noop" / "report.json").unlink()
    assert run("verify", tmp_path / "noop") == hs.EXIT_RUN


def test_output_root_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(hs.OUTPUT_ENV, str(tmp_path / "env"))
    assert run("simulate", "--config", CONFIG_DIR / "noop.yaml") == 0
    assert (tmp_path / "env" / "noop" / "report.json").is_file()
    cfg = config_with(tmp_path, "noop", output=str(tmp_path / "cfg"))
    run("simulate", "--config", cfg)
    assert (tmp_path / "cfg" / "noop" / "report.json").is_file()
    run("simulate", "--config", cfg, "--out", tmp_path / "flag")
    assert (tmp_path / "flag" / "noop" / "report.json").is_file()


def test_attack_outputs(tmp_path):
    cfg = CONFIG_DIR / "attacks.yaml"
    run("simulate", "--config", cfg, "--out", tmp_path)
    assert run("attack", "--config", cfg, "--out", tmp_path) == 0
    rows = read_rows(tmp_path / "attacks" / "attacks.csv")
    kinds = {r["attack"] for r in rows}
    assert kinds == {"gradient-inversion", "model-inversion", "brute-force", "posterior-argmax"}
    grad = [r for r in rows if r["attack"] == "gradient-inversion"]
    sigmas = sorted({float(r["sigma"]) for r in grad})
    med = [np.median([float(r["error"]) for r in grad if float(r["sigma"]) == s]) for s in sigmas]
    assert all(b >= a for a, b in zip(med, med[1:]))
    brute = [r for r in rows if r["attack"] == "brute-force"][0]
    assert brute["found_index"] == brute["planted_index"] == "4095"
    assert brute["decrypt_calls"] == brute["keyspace_size"] == "4096"
    model = [float(r["error"]) for r in rows if r["attack"] == "model-inversion"]
    assert max(model) <= 1e-6


def test_curve_matches_point_simulations(tmp_path):
    cfg = CONFIG_DIR / "randomization.yaml"
    assert run("curve", "--config", cfg, "--out", tmp_path) == 0
    run_dir = tmp_path / "randomization"
    rows = read_rows(run_dir / "curve.csv")
    values = yaml.safe_load(cfg.read_text())["sweep"]["values"]
    assert [float(r["param_value"]) for r in rows] == values
    assert len(rows[0]["feasible_at_budget"].split(";")) == 3
    point = config_with(tmp_path, "randomization", name="point", sweep=None,
                        mechanism={"type": "randomization", "sigma": values[2]})
    run("simulate", "--config", point, "--out", tmp_path)
    rep = hs.load_report(tmp_path / "point" / "report.json")
    assert float(rows[2]["eps_u"]) == rep.eps_u
    assert float(rows[2]["eps_p"]) == rep.eps_p
    trade = json.loads((run_dir / "tradeoff.json").read_text())
    assert trade["budgets"] == [0.05, 0.03, 0.0]
    assert run("verify", run_dir) == 0


def test_single_point_sweep(tmp_path):
    cfg = config_with(tmp_path, "randomization", name="single",
                      sweep={"param": "sigma", "values": [0.3]})
    run("curve", "--config", cfg, "--out", tmp_path)
    assert len(read_rows(tmp_path / "single" / "curve.csv")) == 1


def test_sparsity_curve_h_non_increasing(tmp_path):
    run("curve", "--config", CONFIG_DIR / "sparsity.yaml", "--out", tmp_path)
    rows = read_rows(tmp_path / "sparsity" / "curve.csv")
    h = [float(r["h"]) for r in rows]
    assert all(b <= a for a, b in zip(h, h[1:]))
    assert h[-1] == 0.0


def test_parallel_curve_matches_serial(tmp_path):
    cfg = CONFIG_DIR / "sparsity.yaml"
    run("curve", "--config", cfg, "--out", tmp_path / "serial")
    run("curve", "--config", cfg, "--out", tmp_path / "parallel", "--jobs", 2)
    for name in ("curve.csv", "tradeoff.json"):
        a = (tmp_path / "serial" / "sparsity" / name).read_bytes()
        assert a == (tmp_path / "parallel" / "sparsity" / name).read_bytes()


def test_converged_run_meets_utility_lower_bound(tmp_path):
    # with one local step and many rounds the unprotected aggregate sits at the optimum
    run("curve", "--config", CONFIG_DIR / "converged.yaml", "--out", tmp_path)
    assert run("verify", tmp_path / "converged") == 0
    checks = json.loads((tmp_path / "converged" / "verdict.json").read_text())["checks"]
    lower = [c for c in checks if c["name"] == "utility_tv_lower"]
    assert len(lower) == 3 and all(c["status"] == "pass" for c in lower)
