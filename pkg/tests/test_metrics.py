from __future__ import annotations

import logging
import math

import numpy as np
import pytest
import torch

import src.core.metrics as metrics
from src.core.attacks import AttackConfig, AttackResult
from src.core.estimators import GlmEstimator, MlpEstimator
from src.core.metrics import (
    ReportRow,
    RobustnessReport,
    attack_kls,
    coverage_from_log_probs,
    default_nominal_grid,
    expected_coverage,
    kl_robustness,
    nll_accuracy,
    tradeoff_sweep,
    vulnerable_parameters,
)
from src.core.oracles import analytic_estimator, posterior_cov, posterior_gain, sample_dataset
from src.core.tasks import generate_dataset
from src.core.training import FimRegConfig, TrainConfig


def shifted(point_index: int, x: float, delta: float, error: str | None = None) -> AttackResult:
    return AttackResult(
        delta=np.array([delta]),
        x_perturbed=np.array([x + delta]),
        objective_trace=[],
        final_objective=0.0,
        clamped=False,
        point_index=point_index,
        error=error,
    )


# -----------------------------
# KL robustness
# -----------------------------
def test_kl_robustness_quantiles(scalar_model):
    est = analytic_estimator(scalar_model)
    xs = np.zeros((4, 1))
    results = [shifted(i, 0.0, d) for i, d in enumerate([0.0, 1.0, 2.0, 3.0])]
    # 0.5 * I_x * delta^2 with I_x = 0.5
    np.testing.assert_allclose(attack_kls(est, results, xs), [0.0, 0.25, 1.0, 2.25], atol=1e-12)
    median, q15, q85 = kl_robustness(est, results, xs)
    assert median == pytest.approx(0.625)
    assert q15 == pytest.approx(0.1125)
    assert q85 == pytest.approx(1.6875)


def test_kl_robustness_skips_failed_points(scalar_model):
    est = analytic_estimator(scalar_model)
    results = [shifted(0, 0.0, 2.0), shifted(1, 0.0, math.nan, error="NoConvergence: cap")]
    assert kl_robustness(est, results, np.zeros((2, 1)))[0] == pytest.approx(1.0)


def test_kl_robustness_needs_a_result(scalar_model):
    est = analytic_estimator(scalar_model)
    with pytest.raises(ValueError):
        kl_robustness(est, [], np.zeros((1, 1)))


def test_vulnerable_parameters_are_ranked():
    thetas = np.array([[0.0], [1.0], [2.0], [3.0]])
    top = vulnerable_parameters(thetas, [0.1, 0.5, 0.3, 0.9], fraction=0.5)
    np.testing.assert_array_equal(top, [[3.0], [1.0]])


def test_vulnerable_parameters_keeps_at_least_one():
    assert vulnerable_parameters([[1.0], [2.0]], [0.2, 0.1], fraction=0.1).shape == (1, 1)


def test_report_frame_columns():
    report = RobustnessReport("gaussian_linear", "mlp", "none")
    report.rows.append(ReportRow("pgd_kl_forward", 0.1, 0.105, 1.0, 0.5, 2.0, "pgd_kl_forward_eps0.1", 10))
    frame = report.to_frame()
    assert list(frame.columns[:4]) == ["task", "estimator", "defense", "attack"]
    assert frame.loc[0, "n_failed"] == 0


# -----------------------------
# Coverage
# -----------------------------
def test_coverage_from_log_probs_hand_case():
    truth = np.zeros(4)
    samples = np.full((4, 4), -1.0)
    # 0, 1, 2 and 4 samples above the truth
    samples[:1, 1] = 1.0
    samples[:2, 2] = 1.0
    samples[:, 3] = 1.0
    empirical, stderr = coverage_from_log_probs(samples, truth, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert empirical == [0.25, 0.5, 0.75, 0.75, 1.0]
    assert stderr[1] == pytest.approx(math.sqrt(0.25 / 4))


def test_default_grid():
    grid = default_nominal_grid()
    assert len(grid) == 21
    assert grid[0] == 0.0 and grid[-1] == 1.0


def test_exact_posterior_is_calibrated(diag_model):
    ds = sample_dataset(diag_model, 1000, seed=0)
    curve = expected_coverage(analytic_estimator(diag_model), ds.thetas, ds.xs, n_samples=500, seed=1)
    deviation = np.abs(np.array(curve.empirical) - np.array(curve.nominal))
    assert deviation.max() <= 0.05
    assert curve.empirical[-1] == 1.0
    assert (curve.n_points, curve.n_posterior_samples) == (1000, 500)


def test_overconfident_posterior_undercovers(diag_model):
    ds = sample_dataset(diag_model, 1000, seed=0)
    gain, c = posterior_gain(diag_model)
    narrow = GlmEstimator(2, 2).set_parameters(gain, 0.25 * posterior_cov(diag_model), offset=c)
    curve = expected_coverage(narrow, ds.thetas, ds.xs, n_samples=500, nominal_grid=[0.5])
    assert curve.empirical[0] < 0.4


def test_coverage_is_reproducible(diag_model):
    ds = sample_dataset(diag_model, 200, seed=2)
    est = analytic_estimator(diag_model)
    a = expected_coverage(est, ds.thetas, ds.xs, n_samples=100, seed=4)
    b = expected_coverage(est, ds.thetas, ds.xs, n_samples=100, seed=4)
    assert a.empirical == b.empirical


def test_coverage_warns_on_few_points(diag_model, caplog):
    ds = sample_dataset(diag_model, 20, seed=0)
    with caplog.at_level(logging.WARNING, logger="src.core.metrics"):
        expected_coverage(analytic_estimator(diag_model), ds.thetas, ds.xs, n_samples=100)
    assert "Coverage from only 20 test points" in caplog.text


def test_coverage_input_checks(diag_model):
    est = analytic_estimator(diag_model)
    with pytest.raises(ValueError, match="n_samples"):
        expected_coverage(est, np.zeros((5, 2)), np.zeros((5, 2)), n_samples=50)
    with pytest.raises(ValueError, match="matching"):
        expected_coverage(est, np.zeros((5, 2)), np.zeros((4, 2)))


# -----------------------------
# Accuracy and trade-off
# -----------------------------
def test_nll_accuracy_unit_glm(unit_glm):
    assert nll_accuracy(unit_glm, [[0.0]], [[0.0]]) == pytest.approx(-0.9189385, abs=1e-6)


def test_nll_accuracy_needs_pairs(unit_glm):
    with pytest.raises(ValueError):
        nll_accuracy(unit_glm, np.zeros((0, 1)), np.zeros((0, 1)))


@pytest.fixture(scope="module")
def sweep_data(gl_task):
    return generate_dataset(gl_task, 120, seed=0), generate_dataset(gl_task, 20, seed=1)


def test_tradeoff_sweep_table(sweep_data):
    train, test = sweep_data
    table = tradeoff_sweep(
        train,
        [0.0, 0.5],
        0.2,
        TrainConfig(batch_size=32, val_size=24, max_epochs=2, lr=1e-2),
        make_estimator=lambda: MlpEstimator(10, 10, (8,), seed=0),
        test=test,
        reg=FimRegConfig(n_mc=2),
        attack=AttackConfig(eps=1.0, steps=3),
        n_points=5,
    )
    assert list(table.columns) == ["beta", "accuracy", "robustness", "q15", "q85", "diverged", "flagged"]
    assert table["beta"].tolist() == [0.0, 0.5]
    assert not table["diverged"].any()
    assert not table["flagged"].any()
    assert np.all(np.isfinite(table[["accuracy", "robustness", "q15", "q85"]].to_numpy()))
    assert np.all(table["q15"] <= table["robustness"]) and np.all(table["robustness"] <= table["q85"])


def test_tradeoff_sweep_keeps_diverged_rows(sweep_data):
    train, test = sweep_data

    def broken() -> MlpEstimator:
        est = MlpEstimator(10, 10, (8,), seed=0)
        with torch.no_grad():
            est.layers[-1].bias.fill_(math.nan)
        return est

    table = tradeoff_sweep(
        train,
        [0.1],
        0.2,
        TrainConfig(batch_size=32, val_size=24, max_epochs=1, lr_fallbacks=0),
        make_estimator=broken,
        test=test,
        n_points=5,
    )
    assert table["diverged"].tolist() == [True]
    assert table["flagged"].tolist() == [True]
    assert math.isnan(table.loc[0, "accuracy"])


def test_tradeoff_sweep_flags_beta_when_every_attack_fails(sweep_data, monkeypatch):
    train, test = sweep_data

    def failing(est, ds, cfg, n_points, workers=1):
        return [shifted(i, 0.0, math.nan, error="NoConvergence: cap") for i in range(n_points)]

    monkeypatch.setattr(metrics, "batch_attack", failing)
    table = tradeoff_sweep(
        train,
        [0.0, 0.5],
        0.2,
        TrainConfig(batch_size=32, val_size=24, max_epochs=1, lr=1e-2),
        make_estimator=lambda: MlpEstimator(10, 10, (8,), seed=0),
        test=test,
        reg=FimRegConfig(n_mc=2),
        n_points=5,
    )
    assert table["beta"].tolist() == [0.0, 0.5]
    assert table["flagged"].tolist() == [True, True]
    assert not table["diverged"].any()
    assert table["robustness"].isna().all()
    assert np.all(np.isfinite(table["accuracy"]))


def test_tradeoff_sweep_needs_betas(sweep_data):
    train, test = sweep_data
    with pytest.raises(ValueError):
        tradeoff_sweep(train, [], 0.2, TrainConfig(), make_estimator=lambda: MlpEstimator(10, 10, (8,)), test=test)
