from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import pytest
import yaml

from src.core.estimators import GlmEstimator, MlpEstimator
from src.core.oracles import LinearGaussianModel
from src.core.tasks import Dataset, TaskSpec, custom_task, dataset_from_arrays, gaussian_linear_task

# Hand-checkable 1-D regression data: sum(x theta) = 17, sum(x^2) = 14
HAND_X = [1.0, 2.0, 3.0]
HAND_THETA = [1.0, 2.0, 4.0]


@pytest.fixture(scope="session")
def gl_task() -> TaskSpec:
    return gaussian_linear_task()


@pytest.fixture
def scalar_model() -> LinearGaussianModel:
    """theta ~ N(0, 1), x | theta ~ N(theta, 1)."""
    return LinearGaussianModel.create(A=[[1.0]], Lambda=[[1.0]], Sigma0=[[1.0]])


@pytest.fixture
def diag_model() -> LinearGaussianModel:
    """A = diag(2, 1), unit noise and prior: Sigma_p = diag(0.2, 0.5), I_x = diag(0.8, 0.5)."""
    return LinearGaussianModel.create(A=np.diag([2.0, 1.0]), Lambda=np.eye(2), Sigma0=np.eye(2))


@pytest.fixture
def hand_dataset() -> Dataset:
    return dataset_from_arrays(
        custom_task(1, 1),
        np.array(HAND_THETA)[:, None],
        np.array(HAND_X)[:, None],
        seed=0,
    )


@pytest.fixture
def hand_training_dataset() -> Dataset:
    """The hand data twice: first copy trains, the second is the validation split."""
    thetas = np.array(HAND_THETA * 2)[:, None]
    xs = np.array(HAND_X * 2)[:, None]
    return dataset_from_arrays(custom_task(1, 1), thetas, xs, seed=0)


@pytest.fixture
def unit_glm() -> GlmEstimator:
    return GlmEstimator(1, 1).set_parameters([[1.0]], [[1.0]])


@pytest.fixture
def small_mlp() -> MlpEstimator:
    return MlpEstimator(3, 2, hidden=(8,), seed=0)


@pytest.fixture
def write_config(tmp_path: Path):
    """Write an experiment YAML under tmp_path and return its path."""

    def _write(data: dict[str, Any], name: str = "experiment.yaml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def tiny_experiment(tmp_path: Path) -> dict[str, Any]:
    """Small gaussian_linear run that finishes in seconds."""
    return {
        "task": {"name": "gaussian_linear"},
        "simulation": {"n_train": 64, "n_test": 40, "seed": 0, "test_seed": 1},
        "estimator": {"kind": "mlp", "hidden": [8], "seed": 0},
        "defense": {"kind": "none"},
        "train": {"batch_size": 16, "max_epochs": 3, "lr": 0.01, "val_size": 16, "patience": 5},
        "attack": {"kinds": ["pgd_kl_forward"], "relative_eps": [0.1, 0.5], "n_points": 6, "steps": 5, "chunk_size": 4},
        "evaluate": {"n_samples": 100, "coverage_levels": 5},
        "sweep": {"betas": [0.0, 0.1], "relative_eps": 0.5, "n_points": 4},
        "output_dir": str(tmp_path / "run"),
    }
