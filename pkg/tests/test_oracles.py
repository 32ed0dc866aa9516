from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from src.core.errors import DegenerateSpectrumWarning, NotPositiveDefinite
from src.core.estimators import FeatureMapSpec, fim_exact, glm_fit_closed_form, kl_gaussian, predict
from src.core.numerics import RandomStream, uniform_ball
from src.core.oracles import (
    LinearGaussianModel,
    analytic_estimator,
    fim,
    kl_under_perturbation,
    optimal_attack,
    oracle_for_task,
    posterior,
    posterior_cov,
    posterior_cov_woodbury,
    posterior_gain,
    sample_dataset,
)
from src.core.tasks import sir_task


def random_model(seed: int, x_dim: int = 4, theta_dim: int = 3) -> LinearGaussianModel:
    gen = np.random.default_rng(seed)
    b = gen.standard_normal((x_dim, x_dim))
    c = gen.standard_normal((theta_dim, theta_dim))
    return LinearGaussianModel.create(
        A=gen.standard_normal((x_dim, theta_dim)),
        Lambda=b @ b.T + 0.5 * np.eye(x_dim),
        Sigma0=c @ c.T + 0.5 * np.eye(theta_dim),
        b=gen.standard_normal(x_dim),
        mu0=gen.standard_normal(theta_dim),
    )


# -----------------------------
# Posterior
# -----------------------------
def test_scalar_posterior(scalar_model):
    post = posterior(scalar_model, [2.0])
    assert float(post.mean[0]) == pytest.approx(1.0, rel=1e-12)
    assert float(post.cov[0, 0]) == pytest.approx(0.5, rel=1e-12)


def test_diagonal_posterior_covariance(diag_model):
    np.testing.assert_allclose(posterior_cov(diag_model), np.diag([0.2, 0.5]), atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_information_and_woodbury_forms_agree(seed: int):
    m = random_model(seed)
    np.testing.assert_allclose(posterior_cov(m), posterior_cov_woodbury(m), rtol=1e-8, atol=1e-10)


def test_posterior_is_affine_in_x():
    m = random_model(0)
    gain, c = posterior_gain(m)
    x = np.array([0.5, -1.0, 2.0, 0.1])
    np.testing.assert_allclose(posterior(m, x).mean.numpy(), gain @ x + c, rtol=1e-12)


def test_model_rejects_inconsistent_shapes():
    with pytest.raises(ValueError, match="Inconsistent"):
        LinearGaussianModel.create(A=np.ones((2, 3)), Lambda=np.eye(3), Sigma0=np.eye(3))


def test_model_rejects_indefinite_noise():
    with pytest.raises(NotPositiveDefinite):
        LinearGaussianModel.create(A=[[1.0]], Lambda=[[-1.0]], Sigma0=[[1.0]])


# -----------------------------
# Fisher information and KL
# -----------------------------
def test_scalar_fim(scalar_model):
    np.testing.assert_allclose(fim(scalar_model), [[0.5]], rtol=1e-12)


def test_diagonal_fim(diag_model):
    np.testing.assert_allclose(fim(diag_model), np.diag([0.8, 0.5]), atol=1e-14)


def test_kl_under_perturbation(scalar_model):
    assert kl_under_perturbation(scalar_model, [0.0]) == 0.0
    assert kl_under_perturbation(scalar_model, [2.0]) == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_kl_under_perturbation_matches_posterior_kl(seed: int):
    m = random_model(seed)
    gen = np.random.default_rng(seed)
    x = gen.standard_normal(m.x_dim)
    delta = 0.3 * gen.standard_normal(m.x_dim)
    direct = float(kl_gaussian(posterior(m, x), posterior(m, x + delta)))
    assert kl_under_perturbation(m, delta) == pytest.approx(direct, rel=1e-9, abs=1e-12)


def test_optimal_attack_on_diagonal_model(diag_model):
    delta, bound = optimal_attack(diag_model, 1.0)
    np.testing.assert_allclose(delta, [1.0, 0.0], atol=1e-6)
    assert bound == pytest.approx(0.4, rel=1e-8)
    assert kl_under_perturbation(diag_model, delta) == pytest.approx(bound, rel=1e-8)


def test_optimal_attack_isotropic_warns():
    m = LinearGaussianModel.create(A=np.eye(2), Lambda=np.eye(2), Sigma0=np.eye(2))
    with pytest.warns(DegenerateSpectrumWarning):
        delta, bound = optimal_attack(m, 2.0)
    assert np.linalg.norm(delta) == pytest.approx(2.0)
    # I_x = 0.5 I
    assert bound == pytest.approx(0.5 * 0.5 * 4.0, rel=1e-8)


def test_optimal_attack_rejects_non_positive_eps(diag_model):
    with pytest.raises(ValueError):
        optimal_attack(diag_model, 0.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1), eps=st.floats(min_value=0.01, max_value=5.0))
def test_no_feasible_perturbation_beats_the_bound(seed: int, eps: float):
    m = random_model(seed % 1000)
    _, bound = optimal_attack(m, eps)
    deltas = uniform_ball(RandomStream(seed), 50, m.x_dim, eps)
    assert all(kl_under_perturbation(m, d) <= bound * (1 + 1e-9) for d in deltas)


# -----------------------------
# Task and estimator bridges
# -----------------------------
def test_oracle_for_gaussian_linear_task(gl_task):
    m = oracle_for_task(gl_task)
    assert (m.x_dim, m.theta_dim) == (10, 10)
    np.testing.assert_allclose(m.Lambda, 0.01 * np.eye(10))


def test_oracle_only_for_gaussian_linear():
    with pytest.raises(ValueError, match="No closed-form oracle"):
        oracle_for_task(sir_task())


def test_analytic_estimator_reproduces_posterior():
    m = random_model(3)
    est = analytic_estimator(m)
    x = np.array([1.0, 0.0, -0.5, 0.25])
    exact = posterior(m, x)
    got = predict(est, x)
    np.testing.assert_allclose(got.mean.detach().numpy(), exact.mean.numpy(), rtol=1e-10)
    np.testing.assert_allclose(got.cov.detach().numpy(), exact.cov.numpy(), rtol=1e-10)


def test_analytic_estimator_fim_matches_oracle():
    m = random_model(4)
    np.testing.assert_allclose(fim_exact(analytic_estimator(m), np.zeros(m.x_dim)), fim(m), rtol=1e-9, atol=1e-12)


def test_sample_dataset_is_reproducible(diag_model):
    a = sample_dataset(diag_model, 100, seed=5)
    b = sample_dataset(diag_model, 100, seed=5)
    assert np.array_equal(a.xs, b.xs)
    assert a.task.name == "custom"
    assert (a.task.theta_dim, a.task.x_dim) == (2, 2)


def test_least_squares_fit_recovers_posterior_gain(diag_model):
    ds = sample_dataset(diag_model, 20_000, seed=0)
    est = glm_fit_closed_form(ds, FeatureMapSpec())
    gain, _ = posterior_gain(diag_model)
    np.testing.assert_allclose(est.W.detach().numpy(), gain, atol=0.03)
    with torch.no_grad():
        np.testing.assert_allclose(est.covariance().numpy(), posterior_cov(diag_model), atol=0.03)
