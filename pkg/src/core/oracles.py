from __future__ import annotations

# Closed-form ground truth for linear-Gaussian models: exact posterior,
# Fisher information w.r.t. x, KL under a perturbation and the optimal
# L2 attack.

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import torch

from src.core.estimators import FeatureMapSpec, GaussianPosterior, GlmEstimator
from src.core.numerics import (
    DenseMatrix,
    RandomStream,
    as_dense_matrix,
    cholesky_spd,
    inv_spd,
    solve_spd,
    standard_normal,
    top_eigenpair,
)
from src.core.tasks import Dataset, TaskSpec, custom_task, dataset_from_arrays

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LinearGaussianModel:
    """p(theta) = N(mu0, Sigma0), p(x | theta) = N(A theta + b, Lambda)."""

    A: DenseMatrix
    b: npt.NDArray[np.float64]
    Lambda: DenseMatrix
    mu0: npt.NDArray[np.float64]
    Sigma0: DenseMatrix

    def __post_init__(self) -> None:
        x_dim, theta_dim = self.A.shape
        shapes_ok = (
            self.b.shape == (x_dim,)
            and self.Lambda.shape == (x_dim, x_dim)
            and self.mu0.shape == (theta_dim,)
            and self.Sigma0.shape == (theta_dim, theta_dim)
        )
        if not shapes_ok:
            msg = (
                f"Inconsistent linear-Gaussian dimensions: A {self.A.shape}, b {self.b.shape}, "
                f"Lambda {self.Lambda.shape}, mu0 {self.mu0.shape}, Sigma0 {self.Sigma0.shape}"
            )
            logger.error(msg)
            raise ValueError(msg)
        # Both covariances must factorize
        cholesky_spd(self.Lambda)
        cholesky_spd(self.Sigma0)

    @classmethod
    def create(
        cls,
        A: npt.ArrayLike,
        Lambda: npt.ArrayLike,
        Sigma0: npt.ArrayLike,
        b: npt.ArrayLike | None = None,
        mu0: npt.ArrayLike | None = None,
    ) -> LinearGaussianModel:
        A = as_dense_matrix(A, name="A")
        x_dim, theta_dim = A.shape
        return cls(
            A=A,
            b=np.zeros(x_dim) if b is None else np.asarray(b, dtype=np.float64),
            Lambda=as_dense_matrix(Lambda, name="Lambda"),
            mu0=np.zeros(theta_dim) if mu0 is None else np.asarray(mu0, dtype=np.float64),
            Sigma0=as_dense_matrix(Sigma0, name="Sigma0"),
        )

    @property
    def x_dim(self) -> int:
        return int(self.A.shape[0])

    @property
    def theta_dim(self) -> int:
        return int(self.A.shape[1])


# -----------------------------
# Posterior
# -----------------------------
def posterior_cov(m: LinearGaussianModel) -> DenseMatrix:
    """Sigma_p = (Sigma0^{-1} + A^T Lambda^{-1} A)^{-1} (information form)."""
    precision = inv_spd(m.Sigma0) + m.A.T @ solve_spd(m.Lambda, m.A)
    return inv_spd(precision)


def posterior_cov_woodbury(m: LinearGaussianModel) -> DenseMatrix:
    """Sigma_p = Sigma0 - Sigma0 A^T (Lambda + A Sigma0 A^T)^{-1} A Sigma0."""
    s0_at = m.Sigma0 @ m.A.T
    inner = m.Lambda + m.A @ s0_at
    cov = m.Sigma0 - s0_at @ solve_spd(0.5 * (inner + inner.T), s0_at.T)
    return 0.5 * (cov + cov.T)


def posterior_gain(m: LinearGaussianModel) -> tuple[DenseMatrix, npt.NDArray[np.float64]]:
    """
    Affine posterior-mean map mu_p(x) = K x + c.

    Returns:
        (K, c) with K = Sigma_p A^T Lambda^{-1} and
        c = Sigma_p (Sigma0^{-1} mu0 - A^T Lambda^{-1} b).
    """
    cov = posterior_cov(m)
    lambda_inv_a = solve_spd(m.Lambda, m.A)
    gain = cov @ lambda_inv_a.T
    c = cov @ (solve_spd(m.Sigma0, m.mu0) - lambda_inv_a.T @ m.b)
    return gain, c


def posterior_mean(m: LinearGaussianModel, x: npt.ArrayLike) -> npt.NDArray[np.float64]:
    gain, c = posterior_gain(m)
    return np.asarray(x, dtype=np.float64) @ gain.T + c


def posterior(m: LinearGaussianModel, x: npt.ArrayLike) -> GaussianPosterior:
    """
    Exact posterior N(mu_p, Sigma_p); Sigma_p does not depend on x.

    Raises:
        NotPositiveDefinite: If a covariance fails to factorize.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.x_dim:
        msg = f"x has {x.shape[-1]} entries, model expects {m.x_dim}"
        logger.error(msg)
        raise ValueError(msg)
    mean = posterior_mean(m, x)
    cov = np.broadcast_to(posterior_cov(m), (*mean.shape, m.theta_dim))
    return GaussianPosterior(torch.from_numpy(np.ascontiguousarray(mean)), torch.from_numpy(np.ascontiguousarray(cov)), "full")


# -----------------------------
# Fisher information and attacks
# -----------------------------
def fim(m: LinearGaussianModel) -> DenseMatrix:
    """I_x = Lambda^{-1} A Sigma_p A^T Lambda^{-1}; constant in x."""
    lambda_inv_a = solve_spd(m.Lambda, m.A)
    out = lambda_inv_a @ posterior_cov(m) @ lambda_inv_a.T
    return 0.5 * (out + out.T)


def kl_under_perturbation(m: LinearGaussianModel, delta: npt.ArrayLike) -> float:
    """KL(p(. | x) || p(. | x + delta)) = 0.5 delta^T I_x delta, exactly and for every x."""
    delta = np.asarray(delta, dtype=np.float64)
    return float(0.5 * delta @ fim(m) @ delta)


def optimal_attack(m: LinearGaussianModel, eps: float) -> tuple[npt.NDArray[np.float64], float]:
    """
    Worst-case perturbation in the eps-ball and its KL.

    Returns:
        (eps * v_max, 0.5 * lambda_max * eps^2). When the top eigenvalue is
        degenerate a DegenerateSpectrumWarning is emitted and the returned
        direction is one of many optimal ones.
    """
    if eps <= 0:
        msg = f"eps must be > 0, got {eps}"
        logger.error(msg)
        raise ValueError(msg)
    lam, v = top_eigenpair(fim(m))
    return eps * v, 0.5 * lam * eps**2


# -----------------------------
# Task and estimator bridges
# -----------------------------
def oracle_for_task(task: TaskSpec) -> LinearGaussianModel:
    """Linear-Gaussian model of the gaussian_linear benchmark (frozen diagonal A)."""
    if task.name != "gaussian_linear":
        msg = f"No closed-form oracle for task '{task.name}'"
        logger.error(msg)
        raise ValueError(msg)
    return LinearGaussianModel.create(
        A=task.a_matrix,
        Lambda=task.noise_sigma**2 * np.eye(task.x_dim),
        Sigma0=task.prior.sigma**2 * np.eye(task.theta_dim),
    )


def analytic_estimator(m: LinearGaussianModel) -> GlmEstimator:
    """GLM with identity features parameterized to the exact posterior map."""
    gain, c = posterior_gain(m)
    est = GlmEstimator(m.x_dim, m.theta_dim, FeatureMapSpec(kind="identity"))
    return est.set_parameters(gain, posterior_cov(m), offset=c)


def sample_dataset(m: LinearGaussianModel, n: int, seed: int) -> Dataset:
    """
    n joint draws (theta, x) from the model as a dataset of the 'custom' task.

    Prior and noise draws come from the substreams (seed, "theta") and
    (seed, "noise").
    """
    if n < 2:
        msg = f"n must be >= 2, got {n}"
        logger.error(msg)
        raise ValueError(msg)
    base = RandomStream(seed)
    thetas = m.mu0 + standard_normal(base.substream("theta"), (n, m.theta_dim)) @ cholesky_spd(m.Sigma0).T
    noise = standard_normal(base.substream("noise"), (n, m.x_dim)) @ cholesky_spd(m.Lambda).T
    xs = thetas @ m.A.T + m.b + noise
    return dataset_from_arrays(custom_task(m.theta_dim, m.x_dim), thetas, xs, seed=seed)
