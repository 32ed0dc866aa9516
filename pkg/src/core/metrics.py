from __future__ import annotations

# Evaluation of trained estimators: KL robustness under attack, expected
# coverage of highest-density regions, clean-data accuracy and the
# robustness/accuracy trade-off over the regularization strength.

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
import pandas as pd
import torch

from src.core.attacks import AttackConfig, AttackResult, batch_attack
from src.core.errors import DivergedTraining
from src.core.estimators import Estimator, as_tensor, kl_gaussian, log_prob, sample_reparam
from src.core.numerics import RandomStream
from src.core.tasks import Dataset
from src.core.training import FimRegConfig, TrainConfig, train_fim_regularized

logger = logging.getLogger(__name__)

QUANTILES = (0.15, 0.5, 0.85)
COVERAGE_LEVELS = 21
COVERAGE_CHUNK = 256
MIN_COVERAGE_POINTS = 100
SWEEP_COLUMNS = ["beta", "accuracy", "robustness", "q15", "q85", "diverged", "flagged"]


def default_nominal_grid() -> list[float]:
    return [float(v) for v in np.linspace(0.0, 1.0, COVERAGE_LEVELS)]


@dataclass
class CoverageCurve:
    nominal: list[float]
    empirical: list[float]
    stderr: list[float]
    n_points: int
    n_posterior_samples: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"nominal": self.nominal, "empirical": self.empirical, "stderr": self.stderr})


@dataclass(frozen=True)
class ReportRow:
    attack: str
    relative_eps: float
    absolute_eps: float
    median_kl: float
    q15_kl: float
    q85_kl: float
    coverage_id: str
    n_points: int
    n_failed: int = 0


@dataclass
class RobustnessReport:
    task: str
    estimator_id: str
    defense_id: str
    rows: list[ReportRow] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        columns = ["task", "estimator", "defense", *ReportRow.__dataclass_fields__]
        records = [
            {"task": self.task, "estimator": self.estimator_id, "defense": self.defense_id, **row.__dict__}
            for row in self.rows
        ]
        return pd.DataFrame.from_records(records, columns=columns)


# -----------------------------
# KL robustness
# -----------------------------
def attack_kls(
    est: Estimator, attack_results: Sequence[AttackResult], xs_clean: npt.ArrayLike
) -> npt.NDArray[np.float64]:
    """Closed-form KL(q(. | x) || q(. | x_adv)) per successful attack, in input order."""
    xs_clean = np.asarray(xs_clean, dtype=np.float64)
    ok = [r for r in attack_results if r.ok]
    if not ok:
        return np.zeros(0)
    x = as_tensor(np.stack([xs_clean[r.point_index] for r in ok]))
    x_adv = as_tensor(np.stack([r.x_perturbed for r in ok]))
    with torch.no_grad():
        return kl_gaussian(est(x), est(x_adv)).numpy()


def kl_robustness(
    est: Estimator, attack_results: Sequence[AttackResult], xs_clean: npt.ArrayLike
) -> tuple[float, float, float]:
    """
    Median and 15%/85% quantiles of the post-attack KL.

    Returns:
        (median, q15, q85).

    Raises:
        ValueError: If there is no successful attack result.
    """
    kls = attack_kls(est, attack_results, xs_clean)
    if kls.size == 0:
        msg = "kl_robustness needs at least one successful attack result"
        logger.error(msg)
        raise ValueError(msg)
    q15, med, q85 = np.quantile(kls, QUANTILES)
    return float(med), float(q15), float(q85)


def vulnerable_parameters(
    thetas: npt.ArrayLike, kls: npt.ArrayLike, fraction: float = 0.1
) -> npt.NDArray[np.float64]:
    """Ground-truth parameters of the `fraction` most strongly attacked points, most vulnerable first."""
    if not 0 < fraction <= 1:
        msg = f"fraction must lie in (0, 1], got {fraction}"
        logger.error(msg)
        raise ValueError(msg)
    thetas = np.asarray(thetas, dtype=np.float64)
    kls = np.asarray(kls, dtype=np.float64)
    k = max(1, math.ceil(fraction * kls.size))
    order = np.argsort(-kls, kind="stable")[:k]
    return thetas[order]


# -----------------------------
# Coverage
# -----------------------------
def coverage_from_log_probs(
    sample_log_probs: npt.ArrayLike,
    true_log_probs: npt.ArrayLike,
    nominal_grid: Sequence[float],
) -> tuple[list[float], list[float]]:
    """
    Empirical HPR coverage from log-densities.

    For each point, f is the fraction of posterior samples whose
    log-density exceeds that of the true parameter; the point is covered
    at nominal level L iff f <= L. Only the ranks matter.

    Args:
        sample_log_probs: (n_samples, n_points) log q(theta'_j | x_i).
        true_log_probs: (n_points,) log q(theta_i | x_i).
        nominal_grid: Levels 1 - alpha in [0, 1].

    Returns:
        (empirical coverage per level, binomial standard error per level).
    """
    samples = np.asarray(sample_log_probs, dtype=np.float64)
    truth = np.asarray(true_log_probs, dtype=np.float64)
    f = np.mean(samples > truth[None, :], axis=0)
    n = f.size
    empirical = [float(np.mean(f <= level)) for level in nominal_grid]
    stderr = [math.sqrt(p * (1 - p) / n) for p in empirical]
    return empirical, stderr


def expected_coverage(
    est: Estimator,
    thetas: npt.ArrayLike,
    xs: npt.ArrayLike,
    *,
    n_samples: int = 1000,
    nominal_grid: Sequence[float] | None = None,
    seed: int = 0,
) -> CoverageCurve:
    """
    Expected coverage of the estimator's highest-density regions.

    The observations may be clean or perturbed; pairing is the caller's choice.

    Raises:
        ValueError: If n_samples < 100 or inputs are empty or mismatched.
    """
    if n_samples < 100:
        msg = f"n_samples must be >= 100, got {n_samples}"
        logger.error(msg)
        raise ValueError(msg)
    thetas = np.asarray(thetas, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if thetas.shape[0] == 0 or thetas.shape[0] != xs.shape[0]:
        msg = f"Need matching, non-empty test pairs, got {thetas.shape[0]} thetas and {xs.shape[0]} observations"
        logger.error(msg)
        raise ValueError(msg)
    if thetas.shape[0] < MIN_COVERAGE_POINTS:
        logger.warning("Coverage from only %d test points (< %d)", thetas.shape[0], MIN_COVERAGE_POINTS)

    grid = list(nominal_grid) if nominal_grid is not None else default_nominal_grid()
    base = RandomStream(seed).substream("coverage")
    sample_lps, true_lps = [], []
    with torch.no_grad():
        for c, start in enumerate(range(0, xs.shape[0], COVERAGE_CHUNK)):
            post = est(as_tensor(xs[start : start + COVERAGE_CHUNK]))
            draws = sample_reparam(post, base.substream("chunk", c), n_samples)
            sample_lps.append(log_prob(post, draws).numpy())
            true_lps.append(log_prob(post, as_tensor(thetas[start : start + COVERAGE_CHUNK])).numpy())

    empirical, stderr = coverage_from_log_probs(np.concatenate(sample_lps, axis=1), np.concatenate(true_lps), grid)
    return CoverageCurve(grid, empirical, stderr, int(thetas.shape[0]), n_samples)


# -----------------------------
# Accuracy and trade-off
# -----------------------------
def nll_accuracy(est: Estimator, thetas: npt.ArrayLike, xs: npt.ArrayLike) -> float:
    """Mean log q(theta | x) over test pairs (higher is better)."""
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.shape[0] == 0:
        msg = "nll_accuracy needs at least one test pair"
        logger.error(msg)
        raise ValueError(msg)
    with torch.no_grad():
        return float(log_prob(est(as_tensor(xs)), as_tensor(thetas)).mean())


def tradeoff_sweep(
    ds: Dataset,
    beta_grid: Sequence[float],
    eps: float,
    cfg: TrainConfig,
    *,
    make_estimator: Callable[[], Estimator],
    test: Dataset,
    reg: FimRegConfig | None = None,
    attack: AttackConfig | None = None,
    n_points: int = 100,
    workers: int = 1,
) -> pd.DataFrame:
    """
    Train one FIM-regularized estimator per beta and score it.

    Args:
        ds: Training dataset.
        beta_grid: Regularization strengths (training-loop scale).
        eps: Absolute attack tolerance.
        cfg: Training configuration shared by every beta.
        make_estimator: Fresh, identically initialized estimator per beta.
        test: Held-out pairs for accuracy and attacks.
        reg: Template for gamma, n_mc and penalty; beta is overridden.
        attack: Template attack configuration; eps is overridden.
        n_points: Number of held-out points scored.

    Returns:
        One row per beta with columns beta, accuracy, robustness, q15, q85,
        diverged, flagged. Diverged betas are kept with NaN scores; a beta
        whose attacks all failed keeps its accuracy with NaN robustness.
        Both are flagged.
    """
    if not beta_grid:
        msg = "beta_grid must be non-empty"
        logger.error(msg)
        raise ValueError(msg)
    reg = reg or FimRegConfig()
    attack = (attack or AttackConfig(eps=eps)).model_copy(update={"eps": eps})
    n_points = min(n_points, test.n)

    rows = []
    for beta in beta_grid:
        try:
            est, _ = train_fim_regularized(make_estimator(), ds, cfg, reg.model_copy(update={"beta": float(beta)}))
        except DivergedTraining as e:
            logger.warning("Skipping beta=%g: %s", beta, e)
            rows.append({"beta": float(beta), "accuracy": math.nan, "robustness": math.nan, "q15": math.nan, "q85": math.nan, "diverged": True, "flagged": True})
            continue

        accuracy = nll_accuracy(est, test.thetas[:n_points], test.xs[:n_points])
        results = batch_attack(est, test, attack, n_points, workers=workers)
        try:
            median, q15, q85 = kl_robustness(est, results, test.xs)
        except ValueError as e:
            logger.warning("Flagging beta=%g: %s", beta, e)
            rows.append({"beta": float(beta), "accuracy": accuracy, "robustness": math.nan, "q15": math.nan, "q85": math.nan, "diverged": False, "flagged": True})
            continue
        logger.info("beta=%g accuracy=%.4f median KL=%.4g", beta, accuracy, median)
        rows.append({"beta": float(beta), "accuracy": accuracy, "robustness": median, "q15": q15, "q85": q85, "diverged": False, "flagged": False})

    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)
