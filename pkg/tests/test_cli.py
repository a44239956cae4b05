import json
import subprocess
import sys

import numpy as np
import pytest

from steeradv.cli import main
from steeradv.policy import PolicyConfig, init_params, save_checkpoint

TINY = {"n_scenarios": 12, "pretrain_steps": 100, "epochs": 10, "group_size": 8, "batch_size": 4,
        "lambdas": [0.0, 0.5, 1.0], "lmc_lambdas": [0.0, 0.5, 1.0], "plane_grid": [0.0, 1.0], "ablations": False,
        "closed_loop_iterations": 2, "closed_loop_batch": 4, "closed_loop_holdout": 4, "cem_population": 3,
        "cem_budget": 1, "theory_gap_trials": 20, "theory_bound_trials": 20}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, tiny_config):
    """Corpus, reference policy and both experts written by the CLI into one directory."""
    out = tmp_path_factory.mktemp("run")
    common = ["--config", str(tiny_config), "--out", str(out), "--workers", "2"]
    for cmd in (["corpus"], ["pretrain"], ["finetune"]):
        assert main(cmd + common) == 0
    return out, common


def test_theory_table(tmp_path, capsys):
    code = main(["theory", "--out", str(tmp_path), "--set", "theory_gap_trials=20",
                 "--set", "theory_bound_trials=20"])
    out = capsys.readouterr().out
    assert code == 0
    for name in ("quadratic_gap", "lambda_formula", "general_bound", "mix_linear", "mix_quadratic"):
        assert f"{name}" in out
    assert "FAIL" not in out
    manifest = json.loads((tmp_path / "manifest_theory.json").read_text())
    assert manifest["config"]["theory_gap_trials"] == 20 and manifest["subcommand"] == "theory"


def test_theory_rerun_from_manifest(tmp_path):
    main(["theory", "--out", str(tmp_path / "a"), "--set", "theory_gap_trials=10", "--set", "theory_bound_trials=10",
          "--checks", "quadratic_gap", "general_bound"])
    main(["theory", "--config", str(tmp_path / "a" / "manifest_theory.json"), "--out", str(tmp_path / "b")])
    for name in ("theory_quadratic_gap.csv", "theory_general_bound.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_outputs_written(trained_run):
    out, _ = trained_run
    for name in ("corpus/manifest.json", "ref.json", "theta_adv.json", "theta_real.json",
                 "manifest_corpus.json", "manifest_pretrain.json", "manifest_finetune.json"):
        assert (out / name).exists(), name


def test_generate_and_evaluate(trained_run):
    out, common = trained_run
    assert main(["generate", "--lambda", "0.25", "--mu", "0.25"] + common) == 0
    assert any(out.glob("generated_weight_interp_*.csv"))
    assert main(["evaluate", "--ego", "reactive_pd", "--lambda", "1.0"] + common) == 0
    assert main(["generate", "--mode", "weight_extrap", "--phi", "adv=1.2", "--base", "real"] + common) == 0


def test_lambda_out_of_range_is_a_usage_error(trained_run):
    _, common = trained_run
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--lambda", "1.5"] + common)
    assert exc.value.code == 2


def test_missing_checkpoint(tmp_path, tiny_config, capsys):
    code = main(["generate", "--config", str(tiny_config), "--out", str(tmp_path)])
    assert code == 1
    assert "missing checkpoint" in capsys.readouterr().err


def test_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["theory", "--config", str(bad), "--out", str(tmp_path)]) == 1
    bad.write_text(json.dumps({"epochs": 3, "warp_drive": True}))
    assert main(["theory", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "warp_drive" in capsys.readouterr().err


def test_incompatible_checkpoints(trained_run, tmp_path, capsys):
    _, common = trained_run
    save_checkpoint(init_params(np.random.default_rng(0), PolicyConfig(hidden=(8, 8))), tmp_path / "small.json")
    assert main(["generate", "--ref", str(tmp_path / "small.json")] + common) == 1
    assert "incompatible" in capsys.readouterr().err


def test_unknown_set_key(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["theory", "--out", str(tmp_path), "--set", "nonsense=1"])
    assert exc.value.code == 2


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("STEERADV_OUT", str(tmp_path / "env"))
    assert main(["theory", "--checks", "mix_linear"]) == 0
    assert (tmp_path / "env" / "manifest_theory.json").exists()


def test_flags_override_config(tmp_path, tiny_config):
    main(["corpus", "--config", str(tiny_config), "--set", "n_scenarios=5", "--seed", "3", "--out", str(tmp_path)])
    cfg = json.loads((tmp_path / "manifest_corpus.json").read_text())["config"]
    assert cfg["n_scenarios"] == 5 and cfg["seed"] == 3 and cfg["epochs"] == TINY["epochs"]


def test_pipeline_worker_count_does_not_change_outputs(tmp_path, tiny_config):
    a, b = tmp_path / "w1", tmp_path / "w4"
    assert main(["pipeline", "--config", str(tiny_config), "--workers", "1", "--out", str(a)]) == 0
    assert main(["pipeline", "--config", str(a / "manifest_pipeline.json"), "--workers", "4", "--out", str(b)]) == 0
    files = sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".svg"))
    assert files and files == sorted(p.name for p in b.iterdir() if p.suffix in (".csv", ".svg"))
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "steeradv.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "pipeline" in res.stdout
