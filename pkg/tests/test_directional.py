from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import pytest
from scipy.stats import multivariate_normal

from src.app.pipeline import cmd_attack, cmd_evaluate, cmd_simulate, cmd_sweep, cmd_train, run_dirs
from src.core.config import parse_experiment_config
from src.store.datasets import load_dataset

# Scaled-down runs: directional claims only, every test here is slow
pytestmark = pytest.mark.slow

RELATIVE_EPS = [0.5, 1.0, 2.0]


def experiment(task: str, out: Path, **overrides: Any) -> dict[str, Any]:
    data: dict[str, Any] = {
        "task": {"name": task},
        "simulation": {"n_train": 2000, "n_test": 60},
        "estimator": {"kind": "mlp", "hidden": [64, 64]},
        "defense": {"kind": "none"},
        "train": {"batch_size": 128, "max_epochs": 40, "lr": 1e-3, "val_size": 200, "patience": 10},
        "attack": {
            "kinds": ["pgd_kl_forward"],
            "relative_eps": RELATIVE_EPS,
            "n_points": 40,
            "steps": 50,
            "step_size_factor": 0.5,
        },
        "evaluate": {"n_samples": 200, "coverage_levels": 11},
        "output_dir": str(out),
    }
    data.update(overrides)
    return data


def run_pipeline(data: dict[str, Any]) -> tuple[pd.DataFrame, pd.DataFrame]:
    cfg = parse_experiment_config(data)
    cmd_simulate(cfg)
    cmd_train(cfg)
    cmd_attack(cfg)
    outputs = cmd_evaluate(cfg)
    return pd.read_csv(outputs["report"]), pd.read_csv(outputs["coverage"])


def median_kl(report: pd.DataFrame, attack: str, rel: float) -> float:
    row = report[(report["attack"] == attack) & np.isclose(report["relative_eps"], rel)]
    assert len(row) == 1
    return float(row["median_kl"].iloc[0])


def attacked_coverage(coverage: pd.DataFrame, rel: float, nominal: float = 0.9) -> float:
    row = coverage[
        (coverage["attack"] == "pgd_kl_forward") & np.isclose(coverage["relative_eps"], rel) & np.isclose(coverage["nominal"], nominal)
    ]
    assert len(row) == 1
    return float(row["empirical"].iloc[0])


def inversions(values: list[float], rel_tol: float) -> int:
    """Count steps where a sequence meant to be non-increasing goes up by more than rel_tol."""
    return sum(b > a + rel_tol * abs(a) for a, b in zip(values, values[1:]))


@pytest.fixture(scope="module", params=["sir", "lotka_volterra"])
def npe_run(request, tmp_path_factory):
    task = request.param
    report, coverage = run_pipeline(experiment(task, tmp_path_factory.mktemp(f"{task}_npe")))
    return task, report, coverage


# -----------------------------
# Attacks against plain NPE
# -----------------------------
def test_pgd_beats_random_noise(npe_run):
    _, report, _ = npe_run
    assert (report["n_failed"] == 0).all()
    assert median_kl(report, "pgd_kl_forward", 0.5) >= 10 * median_kl(report, "random_l2", 0.5)


# -----------------------------
# Defenses
# -----------------------------
def test_fim_defense_lowers_kl_and_keeps_coverage(npe_run, tmp_path):
    task, npe_report, npe_coverage = npe_run
    fim_report, fim_coverage = run_pipeline(experiment(task, tmp_path / "fim", defense={"kind": "fim"}))
    for rel in RELATIVE_EPS:
        assert median_kl(fim_report, "pgd_kl_forward", rel) < median_kl(npe_report, "pgd_kl_forward", rel)
        assert attacked_coverage(fim_coverage, rel) >= attacked_coverage(npe_coverage, rel)


@pytest.mark.parametrize("defense", ["trades", "adversarial"])
def test_training_defenses_lower_kl(defense, tmp_path):
    base = {
        "simulation": {"n_train": 1000, "n_test": 60},
        "estimator": {"kind": "mlp", "hidden": [32]},
        "train": {"batch_size": 100, "max_epochs": 20, "lr": 5e-3, "val_size": 100, "patience": 5},
    }
    npe_report, _ = run_pipeline(experiment("gaussian_linear", tmp_path / "npe", **base))
    defended_report, _ = run_pipeline(
        experiment("gaussian_linear", tmp_path / defense, defense={"kind": defense, "attack_steps": 10}, **base)
    )
    assert median_kl(defended_report, "pgd_kl_forward", 0.5) < median_kl(npe_report, "pgd_kl_forward", 0.5)


# -----------------------------
# Trade-off sweep
# -----------------------------
def test_beta_sweep_trades_accuracy_for_robustness(tmp_path):
    data = experiment(
        "sir",
        tmp_path / "sweep",
        simulation={"n_train": 4000, "n_test": 100},
        estimator={"kind": "glm"},
        defense={"kind": "fim", "penalty": "trace_exact"},
        train={"batch_size": 360, "max_epochs": 300, "lr": 1e-2, "val_size": 400, "patience": 30},
        sweep={"betas": [0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e6], "relative_eps": 0.5, "n_points": 100},
    )
    cfg = parse_experiment_config(data)
    cmd_simulate(cfg)
    table = pd.read_csv(cmd_sweep(cfg)["table"])

    assert not table["flagged"].any()
    grid = table[table["beta"] <= 10.0]
    assert inversions(grid["robustness"].tolist(), rel_tol=0.01) <= 1
    assert inversions(grid["accuracy"].tolist(), rel_tol=0.01) <= 1

    # Gaussian fit that ignores x entirely
    train, _ = load_dataset(run_dirs(cfg)["data"], "train")
    test, _ = load_dataset(run_dirs(cfg)["data"], "test")
    marginal = multivariate_normal(train.thetas.mean(axis=0), np.cov(train.thetas, rowvar=False))
    baseline = float(marginal.logpdf(test.thetas).mean())
    flattened = float(table.loc[table["beta"] == 1e6, "accuracy"].iloc[0])
    assert abs(flattened - baseline) <= 0.1 * abs(baseline)
