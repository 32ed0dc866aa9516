from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.app import cli
from src.app.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, LOCK_NAME, main
from src.core.config import ENV_OUT_DIR, ENV_WORKERS
from src.core.errors import DivergedTraining
from src.store.checkpoints import load_checkpoint

STAGES = ("simulate", "train", "attack", "evaluate")


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(ENV_OUT_DIR, raising=False)
    monkeypatch.delenv(ENV_WORKERS, raising=False)


def run_stage(command: str, config: Path, *extra: str) -> int:
    return main([command, "--config", str(config), *extra])


def run_all(config: Path) -> None:
    for stage in STAGES:
        assert run_stage(stage, config) == EXIT_OK, stage


# -----------------------------
# Full pipeline
# -----------------------------
def test_pipeline_writes_every_artifact(write_config, tiny_experiment):
    config = write_config(tiny_experiment)
    run_all(config)
    out = Path(tiny_experiment["output_dir"])

    assert (out / "data" / "train.manifest.yaml").is_file()
    assert (out / "data" / "test.csv").is_file()
    assert (out / "model" / "estimator.params.f64").is_file()
    assert len(list((out / "attacks").glob("*.csv"))) == 4
    assert not (out / LOCK_NAME).exists()

    report = pd.read_csv(out / "eval" / "report.csv")
    assert list(report.columns[:4]) == ["task", "estimator", "defense", "attack"]
    assert "config_hash" in report.columns
    assert sorted(set(report["attack"])) == ["pgd_kl_forward", "random_l2"]
    assert len(report) == 4
    assert (report["n_failed"] == 0).all()
    assert (report["median_kl"] >= 0).all()
    assert "kl_bound" not in report.columns

    coverage = pd.read_csv(out / "eval" / "coverage.csv")
    clean = coverage[coverage["condition"] == "clean"]
    assert clean["nominal"].tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert clean["empirical"].iloc[-1] == 1.0

    config_hash = report["config_hash"].iloc[0]
    assert pd.read_csv(out / "data" / "test.csv")["config_hash"].unique().tolist() == [config_hash]
    for name in ("kl_vs_eps.svg", "coverage.svg"):
        svg = (out / "eval" / name).read_text(encoding="utf-8")
        assert svg.lstrip().startswith("<?xml")
        assert f"config_hash: {config_hash}" in svg


def test_pipeline_is_reproducible(write_config, tiny_experiment, tmp_path):
    first = write_config(tiny_experiment, "a.yaml")
    second = write_config({**tiny_experiment, "output_dir": str(tmp_path / "again")}, "b.yaml")
    for config in (first, second):
        for stage in ("simulate", "train"):
            assert run_stage(stage, config) == EXIT_OK

    a = (Path(tiny_experiment["output_dir"]) / "model" / "estimator.params.f64").read_bytes()
    b = (tmp_path / "again" / "model" / "estimator.params.f64").read_bytes()
    assert a == b


def test_analytic_estimator_reports_bound(write_config, tiny_experiment):
    config = write_config({**tiny_experiment, "estimator": {"kind": "analytic"}})
    run_all(config)
    out = Path(tiny_experiment["output_dir"])

    est, manifest = load_checkpoint(out / "model")
    assert est.kind == "glm"
    assert "best_epoch" not in manifest["metadata"]

    report = pd.read_csv(out / "eval" / "report.csv")
    forward = report[report["attack"] == "pgd_kl_forward"]
    assert np.all(np.isfinite(forward["kl_bound"]))
    # no attack on the exact posterior exceeds the eigenvalue bound
    assert np.all(forward["q85_kl"] <= forward["kl_bound"] * (1 + 1e-6))


def test_sweep_writes_table(write_config, tiny_experiment):
    config = write_config(tiny_experiment)
    assert run_stage("simulate", config) == EXIT_OK
    assert run_stage("sweep", config) == EXIT_OK

    table = pd.read_csv(Path(tiny_experiment["output_dir"]) / "sweep" / "tradeoff.csv")
    assert table["beta"].tolist() == [0.0, 0.1]
    assert not table["flagged"].any()
    svg = (Path(tiny_experiment["output_dir"]) / "sweep" / "tradeoff.svg").read_text(encoding="utf-8")
    assert f"config_hash: {table['config_hash'].iloc[0]}" in svg


def test_out_flag_redirects_outputs(write_config, tiny_experiment, tmp_path):
    config = write_config(tiny_experiment)
    assert run_stage("simulate", config, "--out", str(tmp_path / "elsewhere")) == EXIT_OK
    assert (tmp_path / "elsewhere" / "data" / "train.manifest.yaml").is_file()
    assert not Path(tiny_experiment["output_dir"]).joinpath("data").exists()


# -----------------------------
# Exit codes
# -----------------------------
def test_missing_inputs_exit_with_config_code(write_config, tiny_experiment):
    config = write_config(tiny_experiment)
    assert run_stage("train", config) == EXIT_CONFIG
    assert run_stage("evaluate", config) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert run_stage("simulate", tmp_path / "missing.yaml") == EXIT_CONFIG


def test_invalid_config(write_config, tiny_experiment):
    config = write_config({**tiny_experiment, "train": {"learning_rate": 1.0}})
    assert run_stage("simulate", config) == EXIT_CONFIG


def test_existing_outputs_need_force(write_config, tiny_experiment):
    config = write_config(tiny_experiment)
    assert run_stage("simulate", config) == EXIT_OK
    assert run_stage("simulate", config) == EXIT_CONFIG
    assert run_stage("simulate", config, "--force") == EXIT_OK


def test_stage_refuses_artifacts_from_another_config(write_config, tiny_experiment):
    assert run_stage("simulate", write_config(tiny_experiment)) == EXIT_OK
    changed = write_config({**tiny_experiment, "simulation": {**tiny_experiment["simulation"], "seed": 9}}, "changed.yaml")
    assert run_stage("train", changed) == EXIT_CONFIG


def test_locked_output_directory(write_config, tiny_experiment):
    config = write_config(tiny_experiment)
    out = Path(tiny_experiment["output_dir"])
    out.mkdir(parents=True)
    (out / LOCK_NAME).write_text("12345\n", encoding="utf-8")
    assert run_stage("simulate", config) == EXIT_CONFIG
    assert (out / LOCK_NAME).exists()
    assert not (out / "data").exists()


def test_numeric_failure_exit_code(write_config, tiny_experiment, monkeypatch):
    def diverge(cfg, *, force=False):
        """Always diverges."""
        raise DivergedTraining("loss stayed non-finite")

    monkeypatch.setitem(cli.COMMANDS, "train", diverge)
    assert run_stage("train", write_config(tiny_experiment)) == EXIT_NUMERIC
    assert not (Path(tiny_experiment["output_dir"]) / LOCK_NAME).exists()


def test_empty_attack_set_cannot_be_evaluated(write_config, tiny_experiment):
    config = write_config({**tiny_experiment, "attack": {**tiny_experiment["attack"], "n_points": 0}})
    for stage in ("simulate", "train", "attack"):
        assert run_stage(stage, config) == EXIT_OK
    assert run_stage("evaluate", config) == EXIT_CONFIG


def test_too_many_attack_points(write_config, tiny_experiment):
    config = write_config({**tiny_experiment, "attack": {**tiny_experiment["attack"], "n_points": 41}})
    for stage in ("simulate", "train"):
        assert run_stage(stage, config) == EXIT_OK
    assert run_stage("attack", config) == EXIT_CONFIG


def test_subcommand_is_required():
    with pytest.raises(SystemExit):
        main([])
