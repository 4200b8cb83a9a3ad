import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from snellvi.cli import run_cli
from snellvi.errors import ConfigError
from snellvi.harness import JobConfig, _jsonable, load_job_config, verify_equivalence


def small_put(**extra):
    cfg = {
        "label": "small put",
        "model": {"family": "black_scholes_1d", "params": {"sigma": 0.2, "r": 0.05}, "T": 1.0},
        "payoff": {"type": "put", "strike": 100.0},
        "x0": [100.0],
        "grid": {"n_time": 100, "n_space": 201, "bounds": [[0.0, 300.0]]},
        "mc": {"n_paths": 6000, "seed": 3, "n_steps": 20},
        "diagnostics": {"n_paths": 20, "n_steps": 50},
        "tolerances": {"price_abs": 0.1, "residual_p99": 5e-3},
    }
    cfg.update(extra)
    return cfg


def write(tmp_path, cfg, name="job.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


# --- configuration -------------------------------------------------------------------------------


def test_round_trip_and_overrides():
    cfg = JobConfig.from_dict(small_put())
    again = JobConfig.from_dict(cfg.to_dict())
    assert again.canonical_json() == cfg.canonical_json()
    over = cfg.with_overrides(seed=11, n_paths=100)
    assert over.mc["seed"] == 11 and over.mc["n_paths"] == 100
    assert cfg.mc["seed"] == 3


@pytest.mark.parametrize("patch, message", [
    ({"colour": 1}, "unknown job config keys"),
    ({"mc": {"paths": 3}}, "unknown mc keys"),
    ({"tolerances": {"price": 1}}, "unknown tolerances keys"),
    ({"x0": [1.0, 2.0]}, "x0 has 2 entries"),
    ({"solver": {"relax": 1}}, "unknown solver keys"),
])
def test_config_rejections(patch, message):
    with pytest.raises(ConfigError, match=message):
        JobConfig.from_dict(small_put(**patch))


def test_missing_payoff():
    cfg = small_put()
    del cfg["payoff"]
    with pytest.raises(ConfigError, match="missing-parameter: payoff"):
        JobConfig.from_dict(cfg)


def test_model_file_reference(tmp_path):
    (tmp_path / "model.json").write_text(json.dumps(small_put()["model"]))
    path = write(tmp_path, small_put(model="model.json"))
    assert load_job_config(path).model.family == "black_scholes_1d"


def test_jsonable_non_finite():
    assert _jsonable({"a": float("inf"), "b": [np.float64("nan")], "c": np.int64(2)}) == \
        {"a": "inf", "b": ["nan"], "c": 2}


# --- verification ----------------------------------------------------------------------------------


def test_verify_small_put_passes():
    rep = verify_equivalence(JobConfig.from_dict(small_put()))
    ids = [c.id for c in rep.checks]
    assert ids == ["complementarity_p99", "vi_vs_chain_dp", "vi_vs_lsm", "vi_vs_rule_eval",
                   "supermartingale_drift", "continuation_flat", "martingale_integrand"]
    assert rep.passed, rep.table()
    data = json.loads(rep.to_json())
    assert data["passed"] and data["hypotheses_met"]
    assert set(data["checks"][0]) >= {"id", "measured", "threshold", "status"}


def test_degenerate_model_is_not_claimed():
    cfg = small_put(model={"family": "black_scholes_1d", "params": {"sigma": 0.0, "r": 0.05}, "T": 1.0},
                    x0=[90.0])
    rep = verify_equivalence(JobConfig.from_dict(cfg))
    assert not rep.hypotheses_met
    statuses = {c.id: c.status for c in rep.checks}
    assert statuses["vi_vs_lsm"] == "not_claimed"
    assert "hypotheses unmet" in rep.table()


# --- command line ------------------------------------------------------------------------------------


def test_cli_usage_errors(tmp_path, capsys):
    assert run_cli(["frobnicate"]) == 1
    assert run_cli(["price-vi"]) == 1
    assert run_cli(["price-vi", "--config", str(tmp_path / "missing.json")]) == 1
    bad = write(tmp_path, {"model": {}, "x0": [1]})
    assert run_cli(["price-vi", "--config", str(bad)]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert run_cli(["verify", "--config", str(tmp_path / "broken.json")]) == 1
    assert run_cli(["--help"]) == 0


def test_price_vi_outputs_and_manifest(tmp_path):
    cfg = write(tmp_path, small_put())
    out = tmp_path / "out"
    assert run_cli(["price-vi", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    vi = json.loads((out / "vi.json").read_text())
    assert abs(vi["price"] - 6.09) < 0.05
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "price-vi" and manifest["seeds"]["mc"] == 3
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert {"vi.json", "surface.npz", "surface_t0.csv", "config.resolved.json"} <= set(manifest["files"])


def test_cli_is_deterministic(tmp_path):
    cfg = write(tmp_path, small_put())
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert run_cli(["price-mc", "--config", str(cfg), "--out", str(out), "--quiet", "--n-paths", "2000"]) == 0
        digests.append((out / "manifest.json").read_text())
    assert digests[0] == digests[1]


def test_seed_override_changes_lsm(tmp_path):
    cfg = write(tmp_path, small_put())
    vals = []
    for seed in (1, 2):
        out = tmp_path / f"s{seed}"
        run_cli(["price-mc", "--config", str(cfg), "--out", str(out), "--quiet", "--seed", str(seed),
                 "--n-paths", "2000"])
        vals.append(json.loads((out / "price.json").read_text())["value"])
    assert vals[0] != vals[1]


def test_price_mc_chain_and_diagnose(tmp_path):
    cfg = write(tmp_path, small_put())
    out = tmp_path / "o"
    assert run_cli(["price-mc", "--config", str(cfg), "--out", str(out), "--quiet", "--method", "chain_dp"]) == 0
    assert json.loads((out / "price.json").read_text())["method"] == "chain_dp"
    assert run_cli(["diagnose", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["nondegeneracy"]["nondegenerate"] and diag["hormander"]["hypoelliptic"]


def test_regions_with_density(tmp_path):
    cfg = write(tmp_path, small_put(diagnostics={"density_paths": 4000, "density_nodes": 41}))
    out = tmp_path / "r"
    assert run_cli(["regions", "--config", str(cfg), "--out", str(out), "--quiet", "--density"]) == 0
    data = json.loads((out / "regions.json").read_text())
    assert 75 < data["summary"]["free_boundary_t0_upper"] < 87
    assert len(data["density"]["coverage"]) == 4
    assert (out / "density.csv").exists() and (out / "regions.csv").exists()


def test_verify_exit_codes(tmp_path, capsys):
    ok = write(tmp_path, small_put(), "ok.json")
    assert run_cli(["verify", "--config", str(ok), "--out", str(tmp_path / "v1")]) == 0
    assert "overall: PASS" in capsys.readouterr().out
    strict = small_put(tolerances={"residual_p99": 1e-12})
    bad = write(tmp_path, strict, "strict.json")
    assert run_cli(["verify", "--config", str(bad), "--out", str(tmp_path / "v2"), "--quiet"]) == 2
    report = json.loads((tmp_path / "v2" / "report.json").read_text())
    assert not report["passed"]
    assert (tmp_path / "v2" / "report.txt").read_text().strip().endswith("overall: FAIL")


CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_job_config(path)
    assert JobConfig.from_dict(cfg.to_dict()).canonical_json() == cfg.canonical_json()


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, small_put())
    proc = subprocess.run([sys.executable, "-m", "snellvi", "price-vi", "--config", str(cfg), "--out",
                           str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "variational inequality" in proc.stdout
