from __future__ import annotations

# Experiment stages behind the CLI subcommands. Each stage reads what the
# previous one wrote under the run's output directory:
#
#   data/    train + test datasets (manifest + raw blocks + CSV export)
#   model/   estimator checkpoint + training log
#   attacks/ one CSV + delta / x_perturbed blocks per (attack kind, eps)
#   eval/    robustness report, coverage curves, vulnerable parameters, SVG plots
#   sweep/   robustness/accuracy trade-off table + plot

import logging
import subprocess
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from src.app.plots import plot_coverage, plot_kl_vs_eps, plot_tradeoff
from src.core.attacks import PGD_KINDS, AttackResult, batch_attack
from src.core.config import ExperimentConfig
from src.core.errors import ConfigError
from src.core.estimators import Estimator
from src.core.metrics import (
    QUANTILES,
    ReportRow,
    RobustnessReport,
    attack_kls,
    expected_coverage,
    tradeoff_sweep,
    vulnerable_parameters,
)
from src.core.numerics import top_eigenpair
from src.core.oracles import analytic_estimator, fim, oracle_for_task
from src.core.tasks import Dataset, absolute_tolerance, generate_dataset
from src.core.training import (
    TrainingHistory,
    train_adversarial,
    train_fim_regularized,
    train_noise_augmented,
    train_npe,
    train_trades,
)
from src.store.checkpoints import checkpoint_paths, load_checkpoint, save_checkpoint
from src.store.datasets import dataset_paths, export_dataset_csv, load_dataset, manifest_digest, save_dataset
from src.store.files import ensure_writable
from src.store.results import attack_paths, attack_stem, read_attack_results, write_attack_results, write_frame

logger = logging.getLogger(__name__)

VULNERABLE_FRACTION = 0.1


def run_dirs(cfg: ExperimentConfig) -> dict[str, Path]:
    root = cfg.out_path
    return {name: root / name for name in ("data", "model", "attacks", "eval", "sweep")}


def attack_kinds(cfg: ExperimentConfig) -> list[str]:
    """Configured attack kinds, with the random-direction baseline always included."""
    kinds = list(dict.fromkeys(cfg.attack.kinds))
    if "random_l2" not in kinds:
        kinds.append("random_l2")
    return kinds


# -----------------------------
# Helper functions
# -----------------------------
def _build_id() -> str:
    """git-describe style id of the source tree, or 'unknown' outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            check=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _check_hash(manifest: dict[str, Any], expected: str, label: str) -> None:
    """
    Raises:
        ConfigError: If a stored artifact was produced under another config.
    """
    found = manifest.get("config_hash")
    if found != expected:
        msg = f"{label} was produced by config {str(found)[:12]}, current config is {expected[:12]}; rerun the earlier stage or use its config"
        logger.error(msg)
        raise ConfigError(msg)


def _require_inputs(paths: list[Path], stage: str) -> None:
    """
    Raises:
        FileNotFoundError: Listing every expected input that is missing.
    """
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        msg = f"'{stage}' is missing {len(missing)} input file(s): " + ", ".join(missing)
        logger.error(msg)
        raise FileNotFoundError(msg)


def _load_datasets(cfg: ExperimentConfig, config_hash: str) -> tuple[Dataset, Dataset]:
    data_dir = run_dirs(cfg)["data"]
    train, train_manifest = load_dataset(data_dir, "train")
    test, test_manifest = load_dataset(data_dir, "test")
    _check_hash(train_manifest, config_hash, "Training dataset")
    _check_hash(test_manifest, config_hash, "Held-out dataset")
    return train, test


def _load_estimator(cfg: ExperimentConfig, config_hash: str) -> Estimator:
    est, manifest = load_checkpoint(run_dirs(cfg)["model"])
    _check_hash(manifest, config_hash, "Checkpoint")
    est.eval()
    return est


def _train_estimator(cfg: ExperimentConfig, train: Dataset) -> tuple[Estimator, TrainingHistory | None]:
    """Dispatch on the defense kind; tolerances are converted to absolute units of the training data."""
    task = train.task
    if cfg.estimator.kind == "analytic":
        if cfg.defense.kind != "none":
            msg = f"estimator.kind 'analytic' cannot be combined with defense '{cfg.defense.kind}'"
            logger.error(msg)
            raise ConfigError(msg)
        try:
            model = oracle_for_task(task)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return analytic_estimator(model), None

    est = cfg.estimator.build(task, train)
    defense = cfg.defense
    if defense.kind == "none":
        return train_npe(est, train, cfg.train)
    if defense.kind == "fim":
        return train_fim_regularized(est, train, cfg.train, defense.fim_config(task.name))
    if defense.kind == "trades":
        eps = absolute_tolerance(train, defense.attack_eps)
        return train_trades(est, train, cfg.train, defense.resolved_beta(task.name), eps, defense.attack_steps)
    if defense.kind == "adversarial":
        eps = absolute_tolerance(train, defense.attack_eps)
        return train_adversarial(est, train, cfg.train, eps, defense.attack_steps)
    return train_noise_augmented(est, train, cfg.train, absolute_tolerance(train, defense.noise_eps))


def _analytic_bound(cfg: ExperimentConfig, train: Dataset) -> tuple[list[float], list[float]] | None:
    """0.5 * lambda_max * eps^2 over the relative grid, for the exact linear-Gaussian posterior."""
    if cfg.estimator.kind != "analytic":
        return None
    lam, _ = top_eigenpair(fim(oracle_for_task(train.task)))
    grid = sorted(cfg.attack.relative_eps)
    return grid, [0.5 * lam * absolute_tolerance(train, rel) ** 2 for rel in grid]


# -----------------------------
# Stages
# -----------------------------
def cmd_simulate(cfg: ExperimentConfig, *, force: bool = False) -> dict[str, Path]:
    """
    Simulate the training and held-out datasets.

    Raises:
        FileExistsError: If the datasets exist and force is False.
        FatalSimulatorError: If a row keeps failing after resampling.
    """
    config_hash = cfg.config_hash()
    data_dir = run_dirs(cfg)["data"]
    task = cfg.task.build()

    # Check every output before writing any of them
    planned = {name: dataset_paths(data_dir, name) for name in ("train", "test")}
    ensure_writable([p for paths in planned.values() for p in paths.values()], force=force)

    sim = cfg.simulation
    written: dict[str, Path] = {}
    for name, n, seed in (("train", sim.n_train, sim.seed), ("test", sim.n_test, sim.test_seed)):
        ds = generate_dataset(task, n, seed)
        save_dataset(ds, data_dir, name, config_hash=config_hash, force=force)
        export_dataset_csv(ds, data_dir / f"{name}.csv", config_hash=config_hash)
        written[name] = planned[name]["manifest"]
        logger.info("%s set: n=%d, prior-predictive std=%.6g", name, ds.n, ds.prior_predictive_std)

    return written


def cmd_train(cfg: ExperimentConfig, *, force: bool = False) -> dict[str, Path]:
    """
    Train (or, for the analytic kind, construct) the estimator and write its checkpoint.

    Raises:
        FileNotFoundError: If the training dataset is missing.
        ConfigError: If the dataset belongs to another config.
        DivergedTraining: If training diverges at every learning rate.
    """
    config_hash = cfg.config_hash()
    dirs = run_dirs(cfg)
    _require_inputs([dataset_paths(dirs["data"], "train")["manifest"]], "train")
    train, manifest = load_dataset(dirs["data"], "train")
    _check_hash(manifest, config_hash, "Training dataset")

    log_path = dirs["model"] / "training_log.csv"
    ensure_writable([*checkpoint_paths(dirs["model"]).values(), log_path], force=force)

    est, history = _train_estimator(cfg, train)
    metadata = {
        "build_id": _build_id(),
        "config": cfg.model_dump(mode="json"),
        "defense": cfg.defense.kind,
        "beta": cfg.defense.resolved_beta(train.task.name),
        "train_manifest_sha256": manifest_digest(dirs["data"], "train"),
    }
    if history is not None:
        metadata.update({"best_epoch": history.best_epoch, "best_val_nll": history.best_val_nll})
    digest = save_checkpoint(est, dirs["model"], config_hash=config_hash, metadata=metadata, force=force)

    log = history.to_frame() if history is not None else TrainingHistory().to_frame()
    write_frame(log, log_path, config_hash)
    logger.info("Checkpoint parameters sha256=%s", digest)
    return {"checkpoint": checkpoint_paths(dirs["model"])["manifest"], "log": log_path}


def cmd_attack(cfg: ExperimentConfig, *, force: bool = False) -> list[Path]:
    """
    Attack the first attack.n_points held-out observations for every
    (kind, relative eps) pair.

    Raises:
        FileNotFoundError: If the checkpoint or datasets are missing.
        ConfigError: If inputs belong to another config or n_points exceeds the held-out set.
    """
    config_hash = cfg.config_hash()
    dirs = run_dirs(cfg)
    _require_inputs(
        [checkpoint_paths(dirs["model"])["manifest"], *(dataset_paths(dirs["data"], n)["manifest"] for n in ("train", "test"))],
        "attack",
    )
    train, test = _load_datasets(cfg, config_hash)
    est = _load_estimator(cfg, config_hash)

    n_points = cfg.attack.n_points
    if n_points > test.n:
        msg = f"attack.n_points={n_points} exceeds the {test.n} held-out observations"
        logger.error(msg)
        raise ConfigError(msg)

    kinds = attack_kinds(cfg)
    planned = [p for k in kinds for rel in cfg.attack.relative_eps for p in attack_paths(dirs["attacks"], k, rel).values()]
    ensure_writable(planned, force=force)

    written: list[Path] = []
    for kind in kinds:
        for rel in cfg.attack.relative_eps:
            # Tolerance in units of the training data's prior-predictive std
            eps = absolute_tolerance(train, rel)
            results = batch_attack(est, test, cfg.attack.attack_config(kind, eps), n_points, workers=cfg.attack.workers)
            paths = write_attack_results(
                results,
                dirs["attacks"],
                kind=kind,
                relative_eps=rel,
                absolute_eps=eps,
                x_dim=test.task.x_dim,
                config_hash=config_hash,
            )
            written.append(paths["csv"])

    logger.info("Attack stage complete: %d result file(s)", len(written))
    return written


def cmd_evaluate(cfg: ExperimentConfig, *, force: bool = False) -> dict[str, Path]:
    """
    Score the stored attacks: KL robustness per (kind, eps), coverage on the
    clean and perturbed held-out points, and the matching plots.

    Raises:
        FileNotFoundError: Listing every expected input that is missing.
        ConfigError: If an input belongs to another config or the attack set is empty.
    """
    config_hash = cfg.config_hash()
    dirs = run_dirs(cfg)
    kinds = attack_kinds(cfg)
    grid = cfg.attack.relative_eps
    _require_inputs(
        [
            checkpoint_paths(dirs["model"])["manifest"],
            *(dataset_paths(dirs["data"], n)["manifest"] for n in ("train", "test")),
            *(attack_paths(dirs["attacks"], k, rel)[part] for k in kinds for rel in grid for part in ("csv", "manifest")),
        ],
        "evaluate",
    )
    train, test = _load_datasets(cfg, config_hash)
    est = _load_estimator(cfg, config_hash)

    outputs = {
        "report": dirs["eval"] / "report.csv",
        "coverage": dirs["eval"] / "coverage.csv",
        "vulnerable": dirs["eval"] / "vulnerable.csv",
        "kl_plot": dirs["eval"] / "kl_vs_eps.svg",
        "coverage_plot": dirs["eval"] / "coverage.svg",
    }
    ensure_writable(list(outputs.values()), force=force)

    ev = cfg.evaluate
    nominal = [float(v) for v in np.linspace(0.0, 1.0, ev.coverage_levels)]

    def coverage_rows(condition: str, attack: str, rel: float, thetas: np.ndarray, xs: np.ndarray) -> pd.DataFrame:
        curve = expected_coverage(est, thetas, xs, n_samples=ev.n_samples, nominal_grid=nominal, seed=ev.seed)
        frame = curve.to_frame()
        frame.insert(0, "condition", condition)
        frame.insert(1, "attack", attack)
        frame.insert(2, "relative_eps", rel)
        frame["n_points"] = curve.n_points
        return frame

    # Clean reference on the whole held-out set
    coverage_frames = [coverage_rows("clean", "none", 0.0, test.thetas, test.xs)]
    report = RobustnessReport(task=test.task.name, estimator_id=cfg.estimator.kind, defense_id=cfg.defense.kind)
    vulnerable_frames = []
    n_results = 0

    for kind in kinds:
        for rel in grid:
            results, abs_eps = read_attack_results(dirs["attacks"], kind, rel, expected_hash=config_hash)
            n_results += len(results)
            ok: list[AttackResult] = [r for r in results if r.ok]
            condition = attack_stem(kind, rel)

            kls = attack_kls(est, ok, test.xs)
            if kls.size == 0:
                if results:
                    logger.warning("Every attack in %s failed; reporting NaN", condition)
                q15 = med = q85 = float("nan")
            else:
                q15, med, q85 = (float(v) for v in np.quantile(kls, QUANTILES))
            report.rows.append(
                ReportRow(
                    attack=kind,
                    relative_eps=rel,
                    absolute_eps=abs_eps,
                    median_kl=med,
                    q15_kl=q15,
                    q85_kl=q85,
                    coverage_id=condition,
                    n_points=len(results),
                    n_failed=len(results) - len(ok),
                )
            )
            if not ok:
                continue

            idx = np.array([r.point_index for r in ok])
            x_adv = np.stack([r.x_perturbed for r in ok])
            coverage_frames.append(coverage_rows(condition, kind, rel, test.thetas[idx], x_adv))

            top = vulnerable_parameters(test.thetas[idx], kls, VULNERABLE_FRACTION)
            frame = pd.DataFrame(top, columns=[f"theta_{j}" for j in range(top.shape[1])])
            frame.insert(0, "rank", np.arange(len(frame)))
            frame.insert(0, "relative_eps", rel)
            frame.insert(0, "attack", kind)
            vulnerable_frames.append(frame)

    if n_results == 0:
        msg = "The attack set is empty (attack.n_points = 0); nothing to evaluate"
        logger.error(msg)
        raise ConfigError(msg)

    report_df = report.to_frame()
    bound = _analytic_bound(cfg, train)
    if bound is not None:
        lookup = dict(zip(*bound))
        report_df["kl_bound"] = report_df["relative_eps"].map(lookup)

    write_frame(report_df, outputs["report"], config_hash)
    coverage_df = pd.concat(coverage_frames, ignore_index=True)
    write_frame(coverage_df, outputs["coverage"], config_hash)
    write_frame(pd.concat(vulnerable_frames, ignore_index=True) if vulnerable_frames else pd.DataFrame(), outputs["vulnerable"], config_hash)

    plot_kl_vs_eps(report_df.dropna(subset=["median_kl"]), outputs["kl_plot"], bound=bound, config_hash=config_hash)
    # Clean curve plus every gradient-based attack condition
    shown = coverage_df[(coverage_df["attack"] == "none") | coverage_df["attack"].isin(PGD_KINDS)]
    plot_coverage(shown, outputs["coverage_plot"], config_hash=config_hash)
    return outputs


def cmd_sweep(cfg: ExperimentConfig, *, force: bool = False) -> dict[str, Path]:
    """
    Train one FIM-regularized estimator per sweep.betas value and tabulate
    clean accuracy against median post-attack KL.

    Raises:
        FileNotFoundError: If the datasets are missing.
        ConfigError: If the datasets belong to another config or the estimator kind is analytic.
    """
    config_hash = cfg.config_hash()
    dirs = run_dirs(cfg)
    _require_inputs([dataset_paths(dirs["data"], n)["manifest"] for n in ("train", "test")], "sweep")
    train, test = _load_datasets(cfg, config_hash)

    outputs = {"table": dirs["sweep"] / "tradeoff.csv", "plot": dirs["sweep"] / "tradeoff.svg"}
    ensure_writable(list(outputs.values()), force=force)

    # Fail on an unbuildable estimator before any training starts
    cfg.estimator.build(train.task, train)

    sweep = cfg.sweep
    eps = absolute_tolerance(train, sweep.relative_eps)
    kind = "pgd_kl_forward" if "pgd_kl_forward" in cfg.attack.kinds else cfg.attack.kinds[0]
    table = tradeoff_sweep(
        train,
        sweep.betas,
        eps,
        cfg.train,
        make_estimator=lambda: cfg.estimator.build(train.task, train),
        test=test,
        reg=cfg.defense.fim_config(train.task.name),
        attack=cfg.attack.attack_config(kind, eps),
        n_points=sweep.n_points,
        workers=cfg.attack.workers,
    )
    write_frame(table, outputs["table"], config_hash)
    plot_tradeoff(table, outputs["plot"], config_hash=config_hash)
    return outputs
