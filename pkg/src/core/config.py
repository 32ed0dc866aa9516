from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.core.attacks import AttackConfig, AttackKind
from src.core.errors import ConfigError
from src.core.estimators import Estimator, FeatureMapSpec, GlmEstimator, MlpEstimator
from src.core.tasks import Dataset, TaskSpec, build_task
from src.core.training import DEFAULT_FIM_BETA, FimRegConfig, TrainConfig

logger = logging.getLogger(__name__)

ENV_OUT_DIR = "RNPE_OUT_DIR"
ENV_WORKERS = "RNPE_WORKERS"
DEFAULT_OUT_DIR = "runs/default"

# Relative tolerances of the benchmark grid (units of prior-predictive std)
DEFAULT_RELATIVE_EPS = [0.1, 0.2, 0.3, 0.5, 1.0, 2.0]

_FROZEN = ConfigDict(extra="forbid", frozen=True)


# -----------------------------
# Sections
# -----------------------------
class TaskSection(BaseModel):
    """Benchmark task plus optional simulator overrides (None keeps the task default)."""

    model_config = _FROZEN

    name: Literal["gaussian_linear", "sir", "lotka_volterra"]
    noise_sigma: float | None = Field(default=None, ge=0)
    t_end: float | None = Field(default=None, gt=0)
    substeps: int | None = Field(default=None, ge=1)
    initial_state: list[float] | None = None
    beta_bounds: tuple[float, float] | None = None
    gamma_bounds: tuple[float, float] | None = None
    param_bounds: tuple[float, float] | None = None

    def build(self) -> TaskSpec:
        # Only forward the keys this task's factory understands
        allowed = {
            "gaussian_linear": {"noise_sigma"},
            "sir": {"noise_sigma", "t_end", "substeps", "initial_state", "beta_bounds", "gamma_bounds"},
            "lotka_volterra": {"noise_sigma", "t_end", "substeps", "initial_state", "param_bounds"},
        }[self.name]
        given = {k: v for k, v in self.model_dump(exclude={"name"}).items() if v is not None}
        unknown = sorted(set(given) - allowed)
        if unknown:
            msg = f"task.{unknown[0]} is not a setting of task '{self.name}'"
            logger.error(msg)
            raise ConfigError(msg)
        if "initial_state" in given:
            given["initial_state"] = tuple(given["initial_state"])
        return build_task(self.name, **given)


class SimulationSection(BaseModel):
    model_config = _FROZEN

    n_train: int = Field(default=10_000, ge=2)
    n_test: int = Field(default=1_000, ge=2)
    seed: int = 0
    test_seed: int = 1


class FeatureMapSection(BaseModel):
    model_config = _FROZEN

    kind: Literal["identity", "random_fourier"] = "identity"
    d_phi: int | None = Field(default=None, ge=1)
    bandwidth: float = Field(default=1.0, gt=0)
    seed: int = 0


class EstimatorSection(BaseModel):
    model_config = _FROZEN

    kind: Literal["mlp", "glm", "analytic"] = "mlp"
    hidden: list[int] = Field(default_factory=lambda: [100, 100])
    seed: int = 0
    standardize_inputs: bool = True
    feature_map: FeatureMapSection = Field(default_factory=FeatureMapSection)

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, v: list[int]) -> list[int]:
        if any(h < 1 for h in v):
            raise ValueError("hidden widths must be >= 1")
        return v

    def build(self, task: TaskSpec, train: Dataset | None = None) -> Estimator:
        """Fresh estimator for the task (input scaling taken from `train` when enabled)."""
        if self.kind == "glm":
            fm = self.feature_map
            spec = FeatureMapSpec(kind=fm.kind, d_phi=fm.d_phi, bandwidth=fm.bandwidth, seed=fm.seed)
            return GlmEstimator(task.x_dim, task.theta_dim, spec)
        if self.kind == "analytic":
            msg = "estimator.kind 'analytic' is built from the task oracle, not constructed"
            logger.error(msg)
            raise ConfigError(msg)

        loc = scale = None
        if self.standardize_inputs and train is not None:
            loc = train.xs.mean(axis=0)
            scale = train.xs.std(axis=0)
            scale[scale == 0] = 1.0
        return MlpEstimator(task.x_dim, task.theta_dim, tuple(self.hidden), seed=self.seed, x_loc=loc, x_scale=scale)


class DefenseSection(BaseModel):
    """Defense kind and its hyperparameters; tolerances are relative to the prior-predictive std."""

    model_config = _FROZEN

    kind: Literal["none", "fim", "trades", "adversarial", "noise"] = "none"
    beta: float | None = Field(default=None, ge=0)
    gamma: float = Field(default=0.85, gt=0, le=1)
    n_mc: int = Field(default=5, ge=1)
    penalty: Literal["trace_ema", "trace_exact", "lambda_max_exact"] = "trace_ema"
    attack_eps: float = Field(default=0.5, gt=0)
    attack_steps: int = Field(default=20, ge=1)
    noise_eps: float = Field(default=1.0, ge=0)

    def resolved_beta(self, task_name: str) -> float:
        if self.kind == "none":
            return 0.0
        if self.beta is not None:
            return self.beta
        if self.kind == "fim":
            return DEFAULT_FIM_BETA[task_name]
        return 1.0

    def fim_config(self, task_name: str) -> FimRegConfig:
        return FimRegConfig(beta=self.resolved_beta(task_name), gamma=self.gamma, n_mc=self.n_mc, penalty=self.penalty)


class AttackSection(BaseModel):
    model_config = _FROZEN

    kinds: list[AttackKind] = Field(default_factory=lambda: ["pgd_kl_forward"])
    relative_eps: list[float] = Field(default_factory=lambda: list(DEFAULT_RELATIVE_EPS))
    n_points: int = Field(default=300, ge=0)
    steps: int = Field(default=200, ge=1)
    # step size as a multiple of eps; None gives 2.5 / steps
    step_size_factor: float | None = Field(default=None, gt=0)
    mc_per_step: int = Field(default=5, ge=1)
    mc_final: int = Field(default=256, ge=2)
    mmd_samples: int = Field(default=10, ge=2)
    closed_form: bool = True
    chunk_size: int = Field(default=64, ge=1)
    workers: int = Field(default=1, ge=1)
    seed: int = 0

    @field_validator("relative_eps")
    @classmethod
    def _positive_grid(cls, v: list[float]) -> list[float]:
        if not v or any(e <= 0 for e in v):
            raise ValueError("relative_eps must be a non-empty list of positive values")
        return v

    def attack_config(self, kind: str, eps: float) -> AttackConfig:
        return AttackConfig(
            kind=kind,
            eps=eps,
            steps=self.steps,
            step_size=None if self.step_size_factor is None else self.step_size_factor * eps,
            mc_per_step=self.mc_per_step,
            mc_final=self.mc_final,
            mmd_samples=self.mmd_samples,
            closed_form=self.closed_form,
            chunk_size=self.chunk_size,
            seed=self.seed,
        )


class EvaluateSection(BaseModel):
    model_config = _FROZEN

    n_samples: int = Field(default=1000, ge=100)
    coverage_levels: int = Field(default=21, ge=2)
    seed: int = 0


class SweepSection(BaseModel):
    model_config = _FROZEN

    betas: list[float] = Field(default_factory=lambda: [0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0])
    relative_eps: float = Field(default=0.5, gt=0)
    n_points: int = Field(default=100, ge=1)

    @field_validator("betas")
    @classmethod
    def _non_negative(cls, v: list[float]) -> list[float]:
        if not v or any(b < 0 for b in v):
            raise ValueError("betas must be a non-empty list of values >= 0")
        return v


class ExperimentConfig(BaseModel):
    """Full experiment configuration, one YAML file per run directory."""

    model_config = _FROZEN

    task: TaskSection
    simulation: SimulationSection = Field(default_factory=SimulationSection)
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    defense: DefenseSection = Field(default_factory=DefenseSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    attack: AttackSection = Field(default_factory=AttackSection)
    evaluate: EvaluateSection = Field(default_factory=EvaluateSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    output_dir: str = DEFAULT_OUT_DIR

    def config_hash(self) -> str:
        """sha256 of the canonical JSON dump, ignoring settings that cannot change results."""
        payload = self.model_dump(mode="json", exclude={"output_dir": True, "attack": {"workers"}})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def out_path(self) -> Path:
        return Path(self.output_dir)


# -----------------------------
# Helper functions
# -----------------------------
def _ensure_file_exists(path: Path) -> None:
    """
    Ensure the config path exists and is a file.

    Raises:
        FileNotFoundError: If the path does not exist or is not a file.
    """
    if not path.is_file():
        msg = f"Missing config file at '{path.resolve()}'"
        logger.error(msg)
        raise FileNotFoundError(msg)


def _load_yaml(path: Path) -> dict[str, Any]:
    """
    Load a YAML file and return its top-level mapping.

    Raises:
        ConfigError: If the YAML cannot be parsed or the top-level is not a mapping.
    """
    try:
        with path.open("r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        msg = f"Failed to parse YAML '{path}': {e}"
        logger.error(msg)
        raise ConfigError(msg) from e

    if not isinstance(data, dict):
        msg = f"Config '{path}' must parse to a mapping at top-level, got {type(data).__name__}"
        logger.error(msg)
        raise ConfigError(msg)
    return data


def _apply_seed(data: dict[str, Any], seed: int) -> None:
    # One master seed drives every stream; the test set keeps its own offset
    data.setdefault("simulation", {}).update({"seed": seed, "test_seed": seed + 1})
    for section in ("estimator", "train", "attack", "evaluate"):
        data.setdefault(section, {})["seed"] = seed


def _format_validation_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        where = ".".join(str(p) for p in err["loc"])
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


# -----------------------------
# Main loader
# -----------------------------
def parse_experiment_config(data: dict[str, Any]) -> ExperimentConfig:
    """
    Validate a raw config mapping.

    Raises:
        ConfigError: On unknown keys, wrong types or violated constraints.
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        msg = f"Invalid experiment config: {_format_validation_error(e)}"
        logger.error(msg)
        raise ConfigError(msg) from e


def load_experiment_config(
    path: str | Path,
    *,
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> ExperimentConfig:
    """
    Load an experiment config from YAML and apply overrides.

    Precedence for the output directory: `out_dir` argument, then the
    RNPE_OUT_DIR environment variable (a `.env` file is honoured), then
    `output_dir` in the file. RNPE_WORKERS sets attack.workers.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigError: If the file cannot be parsed or validated.
    """
    path = Path(path)
    _ensure_file_exists(path)
    load_dotenv()

    data = _load_yaml(path)

    # Apply CLI and environment overrides before validation
    if seed is not None:
        _apply_seed(data, seed)
    env_out = os.getenv(ENV_OUT_DIR)
    if out_dir is not None:
        data["output_dir"] = str(out_dir)
    elif env_out:
        data["output_dir"] = env_out
    env_workers = os.getenv(ENV_WORKERS)
    if env_workers:
        try:
            data.setdefault("attack", {})["workers"] = int(env_workers)
        except ValueError as e:
            msg = f"{ENV_WORKERS} must be an integer, got '{env_workers}'"
            logger.error(msg)
            raise ConfigError(msg) from e

    cfg = parse_experiment_config(data)
    logger.info(
        "Loaded config '%s': task=%s estimator=%s defense=%s hash=%s",
        path,
        cfg.task.name,
        cfg.estimator.kind,
        cfg.defense.kind,
        cfg.config_hash()[:12],
    )
    return cfg
