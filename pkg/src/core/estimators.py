from __future__ import annotations

# Conditional Gaussian density estimators q(theta | x): a small tanh MLP with a
# diagonal head and a generalized-linear model with full covariance, plus the
# Gaussian algebra (log-density, sampling, KL) and the Fisher information of
# the posterior map with respect to x.

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
import numpy.typing as npt
import torch
from torch import nn
from torch.distributions import MultivariateNormal
from torch.nn import functional as F

from src.core.errors import NonFiniteOutput, NotPositiveDefinite, SingularGram
from src.core.numerics import (
    RandomStream,
    floor_eigenvalues,
    solve_spd,
    standard_normal,
    top_eigenpair,
    uniform,
)
from src.core.tasks import Dataset

logger = logging.getLogger(__name__)

DTYPE = torch.float64

SIGMA_FLOOR = 1e-6
VARIANCE_MIN = SIGMA_FLOOR**2
COV_EIG_FLOOR = 1e-10

TensorLike = torch.Tensor | npt.ArrayLike


def as_tensor(data: TensorLike) -> torch.Tensor:
    if isinstance(data, torch.Tensor):
        return data.to(DTYPE)
    return torch.as_tensor(np.asarray(data, dtype=np.float64))


# -----------------------------
# Gaussian posteriors
# -----------------------------
@dataclass(frozen=True, eq=False)
class GaussianPosterior:
    """
    Batched Gaussian over theta.

    `mean` has shape (..., d). For cov_kind "diagonal", `cov` holds the
    variances with the same shape as `mean`; for "full" it holds covariance
    matrices of shape (..., d, d).
    """

    mean: torch.Tensor
    cov: torch.Tensor
    cov_kind: Literal["diagonal", "full"]

    def __post_init__(self) -> None:
        expected = self.mean.shape if self.cov_kind == "diagonal" else (*self.mean.shape, self.mean.shape[-1])
        if tuple(self.cov.shape) != tuple(expected):
            msg = f"{self.cov_kind} covariance of shape {tuple(self.cov.shape)} does not match mean {tuple(self.mean.shape)}"
            logger.error(msg)
            raise ValueError(msg)
        if self.cov_kind == "diagonal" and bool(torch.any(self.cov.detach() < VARIANCE_MIN * (1 - 1e-9))):
            msg = f"Diagonal variances must be >= {VARIANCE_MIN:g}"
            logger.error(msg)
            raise ValueError(msg)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[-1])

    @property
    def batch_shape(self) -> torch.Size:
        return self.mean.shape[:-1]

    def full_cov(self) -> torch.Tensor:
        if self.cov_kind == "full":
            return self.cov
        return torch.diag_embed(self.cov)

    def scale_tril(self) -> torch.Tensor:
        """Cholesky factor of the covariance (square root of the diagonal for diagonal heads)."""
        if self.cov_kind == "diagonal":
            return torch.diag_embed(self.cov.sqrt())
        factor, info = torch.linalg.cholesky_ex(self.cov)
        if bool(torch.any(info != 0)):
            msg = "Posterior covariance is not positive definite"
            logger.error(msg)
            raise NotPositiveDefinite(msg)
        return factor

    def detach(self) -> GaussianPosterior:
        return GaussianPosterior(self.mean.detach(), self.cov.detach(), self.cov_kind)

    def __getitem__(self, idx: Any) -> GaussianPosterior:
        if self.cov_kind == "diagonal":
            return GaussianPosterior(self.mean[idx], self.cov[idx], "diagonal")
        return GaussianPosterior(self.mean[idx], self.cov[idx], "full")

    def to_distribution(self) -> MultivariateNormal:
        return MultivariateNormal(self.mean, scale_tril=self.scale_tril())


def log_prob(p: GaussianPosterior, theta: TensorLike) -> torch.Tensor:
    """Exact log-density; theta broadcasts against the posterior batch shape."""
    theta = as_tensor(theta)
    if theta.shape[-1] != p.dim:
        msg = f"theta has {theta.shape[-1]} entries, posterior has dimension {p.dim}"
        logger.error(msg)
        raise ValueError(msg)
    if p.cov_kind == "diagonal":
        z = (theta - p.mean) ** 2 / p.cov
        return -0.5 * (z + torch.log(p.cov) + math.log(2 * math.pi)).sum(-1)
    return p.to_distribution().log_prob(theta)


def sample_reparam(p: GaussianPosterior, stream: RandomStream, n: int) -> torch.Tensor:
    """
    n reparameterized samples theta = mean + L eps, shape (n, *batch, d).

    The noise comes from `stream`; gradients flow from the samples back
    into mean and covariance.
    """
    if n < 1:
        msg = f"n must be >= 1, got {n}"
        logger.error(msg)
        raise ValueError(msg)
    eps = torch.from_numpy(standard_normal(stream, (n, *p.mean.shape)))
    return reparam_transform(p, eps)


def reparam_transform(p: GaussianPosterior, eps: torch.Tensor) -> torch.Tensor:
    """mean + L eps for standard-normal eps of shape (n, *batch, d)."""
    if p.cov_kind == "diagonal":
        return p.mean + p.cov.sqrt() * eps
    return p.mean + (p.scale_tril() @ eps.unsqueeze(-1)).squeeze(-1)


def kl_gaussian(p: GaussianPosterior, q: GaussianPosterior) -> torch.Tensor:
    """
    Closed-form KL(p || q), batched over the broadcast batch shape.

    The covariance part and the mean-shift part are evaluated separately;
    the mean part is a squared norm, so small shifts keep full relative
    precision and a useful gradient.
    """
    if p.dim != q.dim:
        msg = f"KL between Gaussians of dimension {p.dim} and {q.dim}"
        logger.error(msg)
        raise ValueError(msg)

    if p.cov_kind == "diagonal" and q.cov_kind == "diagonal":
        # var_p/var_q - 1 - log(var_p/var_q) written as expm1(u) - u
        u = torch.log(p.cov) - torch.log(q.cov)
        cov_part = (torch.expm1(u) - u).sum(-1)
        shift = ((q.mean - p.mean) ** 2 / q.cov).sum(-1)
        return 0.5 * (cov_part.clamp_min(0.0) + shift)

    batch = torch.broadcast_shapes(p.batch_shape, q.batch_shape)
    d = p.dim
    lp = p.scale_tril().expand(*batch, d, d)
    lq = q.scale_tril().expand(*batch, d, d)
    diff = (q.mean - p.mean).expand(*batch, d).unsqueeze(-1)

    m = torch.linalg.solve_triangular(lq, lp, upper=False)
    z = torch.linalg.solve_triangular(lq, diff, upper=False)
    log_det_ratio = 2.0 * (
        torch.log(torch.diagonal(lq, dim1=-2, dim2=-1)) - torch.log(torch.diagonal(lp, dim1=-2, dim2=-1))
    ).sum(-1)
    cov_part = (m**2).sum((-2, -1)) - d + log_det_ratio
    return 0.5 * (cov_part.clamp_min(0.0) + (z**2).sum((-2, -1)))


def kl_monte_carlo(
    p: GaussianPosterior | Callable[[], GaussianPosterior],
    q: GaussianPosterior | Callable[[], GaussianPosterior],
    stream: RandomStream,
    n: int,
) -> torch.Tensor:
    """
    Monte Carlo KL(p || q) with n reparameterized samples from p.

    Either argument may be a zero-argument closure producing the posterior,
    so q can be conditioned on a perturbed input that carries gradients.
    """
    p_post = p() if callable(p) else p
    q_post = q() if callable(q) else q
    theta = sample_reparam(p_post, stream, n)
    return (log_prob(p_post, theta) - log_prob(q_post, theta)).mean(0)


# -----------------------------
# Feature maps
# -----------------------------
@dataclass(frozen=True)
class FeatureMapSpec:
    kind: Literal["identity", "random_fourier"] = "identity"
    d_phi: int | None = None
    bandwidth: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind == "random_fourier" and (self.d_phi is None or self.d_phi < 1):
            msg = "random_fourier features need d_phi >= 1"
            logger.error(msg)
            raise ValueError(msg)
        if self.bandwidth <= 0:
            msg = f"bandwidth must be > 0, got {self.bandwidth}"
            logger.error(msg)
            raise ValueError(msg)


class FeatureMap(nn.Module):
    """Fixed (non-learnable) feature map phi: R^{x_dim} -> R^{d_phi} with a closed-form Jacobian."""

    def __init__(self, spec: FeatureMapSpec, x_dim: int) -> None:
        super().__init__()
        self.spec = spec
        self.x_dim = x_dim
        if spec.kind == "identity":
            if spec.d_phi not in (None, x_dim):
                msg = f"identity features need d_phi == x_dim ({x_dim}), got {spec.d_phi}"
                logger.error(msg)
                raise ValueError(msg)
            self.d_phi = x_dim
            self.register_buffer("omega", torch.eye(x_dim, dtype=DTYPE))
            self.register_buffer("phase", torch.zeros(x_dim, dtype=DTYPE))
        else:
            self.d_phi = int(spec.d_phi)
            stream = RandomStream(spec.seed).substream("random_fourier")
            omega = standard_normal(stream, (self.d_phi, x_dim)) / spec.bandwidth
            phase = 2 * math.pi * uniform(stream, self.d_phi)
            self.register_buffer("omega", torch.from_numpy(omega))
            self.register_buffer("phase", torch.from_numpy(phase))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.spec.kind == "identity":
            return x
        return math.sqrt(2.0 / self.d_phi) * torch.cos(x @ self.omega.T + self.phase)

    def jacobian(self, x: torch.Tensor) -> torch.Tensor:
        """d phi / d x with shape (..., d_phi, x_dim)."""
        if self.spec.kind == "identity":
            return self.omega.expand(*x.shape[:-1], self.d_phi, self.x_dim)
        s = -math.sqrt(2.0 / self.d_phi) * torch.sin(x @ self.omega.T + self.phase)
        return s.unsqueeze(-1) * self.omega


# -----------------------------
# Estimators
# -----------------------------
class MlpEstimator(nn.Module):
    """
    tanh MLP with a diagonal Gaussian head.

    The final layer emits 2 * theta_dim values split into the mean and a raw
    scale; sigma = softplus(raw) + 1e-6. Inputs are shifted and scaled by
    fixed buffers (identity unless given) before the first layer.
    """

    kind = "mlp"

    def __init__(
        self,
        x_dim: int,
        theta_dim: int,
        hidden: tuple[int, ...] = (100, 100),
        *,
        seed: int = 0,
        x_loc: npt.ArrayLike | None = None,
        x_scale: npt.ArrayLike | None = None,
    ) -> None:
        super().__init__()
        self.x_dim = x_dim
        self.theta_dim = theta_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = seed

        sizes = [x_dim, *self.hidden, 2 * theta_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))

        loc = torch.zeros(x_dim, dtype=DTYPE) if x_loc is None else as_tensor(x_loc)
        scale = torch.ones(x_dim, dtype=DTYPE) if x_scale is None else as_tensor(x_scale)
        self.register_buffer("x_loc", loc.clone())
        self.register_buffer("x_scale", scale.clone())

        self.reset_parameters()

    def reset_parameters(self) -> None:
        # U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn from the estimator seed
        stream = RandomStream(self.seed).substream("mlp_init")
        with torch.no_grad():
            for i, layer in enumerate(self.layers):
                bound = 1.0 / math.sqrt(layer.in_features)
                w = bound * (2.0 * uniform(stream.substream("weight", i), (layer.out_features, layer.in_features)) - 1.0)
                b = bound * (2.0 * uniform(stream.substream("bias", i), layer.out_features) - 1.0)
                layer.weight.copy_(torch.from_numpy(w))
                layer.bias.copy_(torch.from_numpy(b))

    def head(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(mean, sigma) of the diagonal Gaussian at x."""
        h = (x - self.x_loc) / self.x_scale
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        out = self.layers[-1](h)
        mean, raw = out.split(self.theta_dim, dim=-1)
        return mean, F.softplus(raw) + SIGMA_FLOOR

    def forward(self, x: torch.Tensor) -> GaussianPosterior:
        mean, sigma = self.head(x)
        return GaussianPosterior(mean, sigma**2, "diagonal")

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "x_dim": self.x_dim, "theta_dim": self.theta_dim, "hidden": list(self.hidden), "seed": self.seed}


class GlmEstimator(nn.Module):
    """
    q(theta | x) = N(W phi(x) + offset, Sigma) with a fixed feature map.

    Sigma is parameterized by its Cholesky factor with a log-diagonal. The
    offset is a fixed buffer (zero unless set) so affine posterior maps are
    representable.
    """

    kind = "glm"

    def __init__(self, x_dim: int, theta_dim: int, feature_spec: FeatureMapSpec | None = None) -> None:
        super().__init__()
        self.x_dim = x_dim
        self.theta_dim = theta_dim
        self.feature_map = FeatureMap(feature_spec or FeatureMapSpec(), x_dim)
        self.W = nn.Parameter(torch.zeros(theta_dim, self.feature_map.d_phi, dtype=DTYPE))
        self.L_raw = nn.Parameter(torch.zeros(theta_dim, theta_dim, dtype=DTYPE))
        self.register_buffer("offset", torch.zeros(theta_dim, dtype=DTYPE))

    def cholesky_factor(self) -> torch.Tensor:
        strict = torch.tril(self.L_raw, diagonal=-1)
        return strict + torch.diag(torch.exp(torch.diagonal(self.L_raw)))

    def covariance(self) -> torch.Tensor:
        factor = self.cholesky_factor()
        return factor @ factor.T

    def set_parameters(self, W: npt.ArrayLike, Sigma: npt.ArrayLike, offset: npt.ArrayLike | None = None) -> GlmEstimator:
        """Load (W, Sigma[, offset]) in place; Sigma must be SPD."""
        W_t = as_tensor(np.atleast_2d(np.asarray(W, dtype=np.float64)))
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
        try:
            factor = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError as e:
            msg = f"Sigma is not positive definite: {e}"
            logger.error(msg)
            raise NotPositiveDefinite(msg) from e
        raw = np.tril(factor, k=-1) + np.diag(np.log(np.diag(factor)))
        with torch.no_grad():
            self.W.copy_(W_t.reshape(self.W.shape))
            self.L_raw.copy_(torch.from_numpy(raw))
            if offset is not None:
                self.offset.copy_(as_tensor(offset).reshape(self.offset.shape))
        return self

    def forward(self, x: torch.Tensor) -> GaussianPosterior:
        mean = self.feature_map(x) @ self.W.T + self.offset
        cov = self.covariance().expand(*mean.shape[:-1], self.theta_dim, self.theta_dim)
        return GaussianPosterior(mean, cov, "full")

    def describe(self) -> dict[str, Any]:
        spec = self.feature_map.spec
        return {
            "kind": self.kind,
            "x_dim": self.x_dim,
            "theta_dim": self.theta_dim,
            "feature_map": {"kind": spec.kind, "d_phi": self.feature_map.d_phi, "bandwidth": spec.bandwidth, "seed": spec.seed},
        }


Estimator = MlpEstimator | GlmEstimator


def estimator_from_descriptor(desc: dict[str, Any]) -> Estimator:
    """Rebuild an (untrained) estimator from its `describe()` dict."""
    kind = desc.get("kind")
    if kind == "mlp":
        return MlpEstimator(int(desc["x_dim"]), int(desc["theta_dim"]), tuple(desc["hidden"]), seed=int(desc["seed"]))
    if kind == "glm":
        fm = desc["feature_map"]
        spec = FeatureMapSpec(kind=fm["kind"], d_phi=int(fm["d_phi"]), bandwidth=float(fm["bandwidth"]), seed=int(fm["seed"]))
        return GlmEstimator(int(desc["x_dim"]), int(desc["theta_dim"]), spec)
    msg = f"Unknown estimator kind '{kind}'"
    logger.error(msg)
    raise ValueError(msg)


# -----------------------------
# Prediction and input gradients
# -----------------------------
def predict(est: Estimator, x: TensorLike) -> GaussianPosterior:
    """
    Posterior q(. | x) for a single x (x_dim,) or a batch (..., x_dim).

    Raises:
        ValueError: If x has the wrong dimension or is non-finite.
        NonFiniteOutput: If the estimator head produces NaN or inf.
    """
    x = as_tensor(x)
    if x.shape[-1] != est.x_dim:
        msg = f"x has {x.shape[-1]} entries, estimator expects {est.x_dim}"
        logger.error(msg)
        raise ValueError(msg)
    if not bool(torch.all(torch.isfinite(x.detach()))):
        msg = "x contains non-finite entries"
        logger.error(msg)
        raise ValueError(msg)

    post = est(x)
    if not (bool(torch.all(torch.isfinite(post.mean.detach()))) and bool(torch.all(torch.isfinite(post.cov.detach())))):
        msg = f"{est.kind} estimator produced a non-finite posterior"
        logger.error(msg)
        raise NonFiniteOutput(msg)
    return post


def grad_logprob_wrt_x(est: Estimator, x: TensorLike, theta: TensorLike) -> npt.NDArray[np.float64]:
    """d/dx log q(theta | x), batched over leading dimensions of x and theta."""
    x_var = as_tensor(x).detach().clone().requires_grad_(True)
    theta = as_tensor(theta).detach()
    lp = log_prob(est(x_var), theta)
    (grad,) = torch.autograd.grad(lp.sum(), x_var)
    return grad.numpy()


# -----------------------------
# Fisher information w.r.t. x
# -----------------------------
def _fim_tensor(est: Estimator, x: torch.Tensor) -> torch.Tensor:
    """Exact FIM (..., x_dim, x_dim), differentiable w.r.t. estimator parameters."""
    if isinstance(est, GlmEstimator):
        # J_phi^T W^T Sigma^{-1} W J_phi
        jw = est.W @ est.feature_map.jacobian(x)
        factor = est.cholesky_factor().expand(*jw.shape[:-2], est.theta_dim, est.theta_dim)
        sigma_inv_jw = torch.cholesky_solve(jw, factor)
        return jw.transpose(-1, -2) @ sigma_inv_jw

    x_var = x.detach().clone().requires_grad_(True)
    mean, sigma = est.head(x_var)
    eta = torch.cat([mean, sigma], dim=-1)
    # Rows of the head Jacobian d(mu, sigma)/dx; batch rows are independent
    rows = [
        torch.autograd.grad(eta[..., k].sum(), x_var, create_graph=True)[0]
        for k in range(eta.shape[-1])
    ]
    jac = torch.stack(rows, dim=-2)
    weights = torch.cat([1.0 / sigma**2, 2.0 / sigma**2], dim=-1)
    return jac.transpose(-1, -2) @ (weights.unsqueeze(-1) * jac)


def fim_exact(est: Estimator, x: TensorLike) -> npt.NDArray[np.float64]:
    """
    Fisher information of q(theta | x) with respect to x.

    For the diagonal head this is J^T diag(1/sigma^2, 2/sigma^2) J with J the
    Jacobian of (mu, sigma) w.r.t. x; for the GLM it is
    J_phi^T W^T Sigma^{-1} W J_phi. Returns a symmetric PSD matrix (or a
    batch of them).
    """
    fim = _fim_tensor(est, as_tensor(x)).detach()
    return (0.5 * (fim + fim.transpose(-1, -2))).numpy()


def fim_trace_exact(est: Estimator, x: TensorLike) -> torch.Tensor:
    """tr(I_x), differentiable w.r.t. estimator parameters."""
    return torch.diagonal(_fim_tensor(est, as_tensor(x)), dim1=-2, dim2=-1).sum(-1)


def fim_lambda_max_exact(est: Estimator, x: TensorLike) -> torch.Tensor:
    """
    Largest eigenvalue of I_x, differentiable w.r.t. estimator parameters.

    The top eigenvector v is found on a detached copy; v^T I_x v then has
    the eigenvalue's parameter gradient.
    """
    x = as_tensor(x)
    fim = _fim_tensor(est, x)
    flat = fim.reshape(-1, est.x_dim, est.x_dim)
    detached = flat.detach().numpy()
    vs = np.stack([top_eigenpair(0.5 * (m + m.T))[1] for m in detached])
    v = torch.from_numpy(vs)
    lam = torch.einsum("bi,bij,bj->b", v, flat, v)
    return lam.reshape(fim.shape[:-2])


def fim_trace_mc(est: Estimator, x: TensorLike, stream: RandomStream, n: int) -> torch.Tensor:
    """
    Monte Carlo trace of the FIM: mean of ||d/dx log q(theta_i | x)||^2.

    theta_i are reparameterized draws from q(. | x), so the result is
    differentiable w.r.t. the estimator parameters (through both the
    samples and the input gradient). x may be a batch; one value per x.
    """
    if n < 1:
        msg = f"n must be >= 1, got {n}"
        logger.error(msg)
        raise ValueError(msg)
    x = as_tensor(x).detach()
    theta = sample_reparam(est(x), stream, n)

    x_var = x.expand(n, *x.shape).clone().requires_grad_(True)
    lp = log_prob(est(x_var), theta)
    (grad,) = torch.autograd.grad(lp.sum(), x_var, create_graph=True)
    return (grad**2).sum(-1).mean(0)


# -----------------------------
# Closed-form generalized-linear fits
# -----------------------------
def _design(ds: Dataset, fm: FeatureMapSpec) -> tuple[FeatureMap, npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    feature_map = FeatureMap(fm, ds.task.x_dim)
    with torch.no_grad():
        phi = feature_map(torch.from_numpy(ds.xs)).numpy()
    if ds.n <= feature_map.d_phi:
        msg = f"Feature Gram matrix is singular: N={ds.n} <= d_phi={feature_map.d_phi}"
        logger.error(msg)
        raise SingularGram(msg)
    return feature_map, phi, ds.thetas


def _ridge_solve(gram: npt.NDArray[np.float64], rhs: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    try:
        return solve_spd(0.5 * (gram + gram.T), rhs)
    except NotPositiveDefinite as e:
        msg = f"Feature Gram matrix could not be factorized: {e}"
        logger.error(msg)
        raise SingularGram(msg) from e


def feature_jacobian_gram(fm: FeatureMap, xs: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Omega(X) = (1/N) sum_i J_phi(x_i) J_phi(x_i)^T."""
    with torch.no_grad():
        jac = fm.jacobian(torch.from_numpy(xs)).numpy()
    return np.einsum("nik,njk->ij", jac, jac) / xs.shape[0]


def _glm_from(fm: FeatureMap, ds: Dataset, W: npt.NDArray[np.float64], sigma: npt.NDArray[np.float64]) -> GlmEstimator:
    est = GlmEstimator(ds.task.x_dim, ds.task.theta_dim, fm.spec)
    return est.set_parameters(W, floor_eigenvalues(sigma, COV_EIG_FLOOR))


def glm_fit_closed_form(ds: Dataset, fm: FeatureMapSpec) -> GlmEstimator:
    """
    Global NPE minimizer for the generalized-linear Gaussian family.

    W = Theta^T Phi (Phi^T Phi)^{-1} and Sigma = residual covariance, with
    Sigma's eigenvalues floored at 1e-10.

    Raises:
        SingularGram: If N <= d_phi or the Gram matrix cannot be factorized.
    """
    return glm_fit_fim_closed_form(ds, fm, 0.0)


def glm_fit_fim_closed_form(ds: Dataset, fm: FeatureMapSpec, beta: float) -> GlmEstimator:
    """
    Closed-form minimizer of summed NLL plus beta times the mean FIM trace.

    W_FIM = Theta^T Phi (Phi^T Phi + 2 beta Omega)^{-1} and
    Sigma_FIM = Sigma(W_FIM) + (2 beta / N) W_FIM Omega W_FIM^T, where
    Omega = (1/N) sum_i J_phi(x_i) J_phi(x_i)^T. beta = 0 is the plain
    least-squares fit. The covariance factor comes from zeroing d/dSigma of
    (N/2) log|Sigma| + 1/2 sum_i r_i^T Sigma^{-1} r_i + beta tr(Sigma^{-1} W Omega W^T).

    Args:
        ds: Training pairs.
        fm: Feature map specification.
        beta: Regularization strength on the summed-loss scale
            (see `training.closed_form_beta`).

    Raises:
        SingularGram: If N <= d_phi or the Gram matrix cannot be factorized.
    """
    if beta < 0:
        msg = f"beta must be >= 0, got {beta}"
        logger.error(msg)
        raise ValueError(msg)

    feature_map, phi, thetas = _design(ds, fm)
    n = phi.shape[0]
    gram = phi.T @ phi

    if beta > 0:
        omega = feature_jacobian_gram(feature_map, ds.xs)
        gram = gram + 2.0 * beta * omega

    W = _ridge_solve(gram, phi.T @ thetas).T
    resid = phi @ W.T - thetas
    sigma = resid.T @ resid / n
    if beta > 0:
        sigma = sigma + (2.0 * beta / n) * (W @ omega @ W.T)

    logger.debug("GLM closed-form fit: N=%d d_phi=%d beta=%g", n, feature_map.d_phi, beta)
    return _glm_from(feature_map, ds, W, sigma)
