from __future__ import annotations

# L2-bounded adversarial perturbations of the conditioning observation:
# projected gradient ascent on posterior divergences (KL, MMD) or on the NLL
# of the true parameter, plus a random-direction baseline.

import logging
import math
import warnings
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import numpy.typing as npt
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.errors import ZeroGradientWarning
from src.core.estimators import (
    Estimator,
    GaussianPosterior,
    as_tensor,
    kl_gaussian,
    log_prob,
    reparam_transform,
)
from src.core.numerics import RandomStream, standard_normal, uniform_ball, uniform_sphere
from src.core.tasks import Dataset

logger = logging.getLogger(__name__)

AttackKind = Literal["pgd_kl_forward", "pgd_kl_reverse", "random_l2", "mmd", "nll"]
PGD_KINDS: tuple[str, ...] = ("pgd_kl_forward", "pgd_kl_reverse", "mmd", "nll")

ZERO_GRAD_TOL = 1e-12
INIT_RADIUS = 1e-3


class AttackConfig(BaseModel):
    """
    One attack setting. `eps` is absolute (already scaled by the dataset's
    prior-predictive std). `step_size` defaults to 2.5 * eps / steps.

    The default step reaches the sphere quickly but is too small to rotate
    along it: on a quadratic objective the iterate can stall short of the
    top eigenvector. Matching the 0.5 * lambda_max * eps^2 bound needs
    step_size around 0.5 * eps.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: AttackKind = "pgd_kl_forward"
    eps: float = Field(gt=0)
    steps: int = Field(default=200, ge=1)
    step_size: float | None = Field(default=None, gt=0)
    mc_per_step: int = Field(default=5, ge=1)
    mc_final: int = Field(default=256, ge=2)
    mmd_samples: int = Field(default=10, ge=2)
    closed_form: bool = True
    restarts: int = Field(default=3, ge=0)
    chunk_size: int = Field(default=64, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _even_mmd_samples(self) -> AttackConfig:
        if self.mmd_samples % 2 or self.mc_final % 2:
            raise ValueError("mmd_samples and mc_final must be even (paired MMD estimator)")
        return self

    @property
    def resolved_step_size(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.eps / self.steps

    @property
    def uses_monte_carlo(self) -> bool:
        return self.kind == "mmd" or (self.kind in ("pgd_kl_forward", "pgd_kl_reverse") and not self.closed_form)


@dataclass
class AttackResult:
    delta: npt.NDArray[np.float64]
    x_perturbed: npt.NDArray[np.float64]
    objective_trace: list[float]
    final_objective: float
    clamped: bool
    point_index: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


# -----------------------------
# Projection and clamping
# -----------------------------
def project_l2_ball(delta: npt.ArrayLike, eps: float) -> npt.NDArray[np.float64]:
    """Project delta (a vector, or one vector per row) onto the L2 ball of radius eps."""
    if eps <= 0:
        msg = f"eps must be > 0, got {eps}"
        logger.error(msg)
        raise ValueError(msg)
    return _project_rows(as_tensor(delta), eps).numpy()


def _project_rows(delta: torch.Tensor, eps: float) -> torch.Tensor:
    norms = torch.linalg.vector_norm(delta, dim=-1, keepdim=True)
    scale = torch.where(norms > eps, eps / norms.clamp_min(torch.finfo(delta.dtype).tiny), torch.ones_like(norms))
    return delta * scale


def _feasible(x: torch.Tensor, delta: torch.Tensor, eps: float, lo: torch.Tensor, hi: torch.Tensor) -> torch.Tensor:
    # Project, clamp x + delta into the box, then re-project the clamped delta
    delta = _project_rows(delta, eps)
    x_adv = torch.clamp(x + delta, lo, hi)
    return _project_rows(x_adv - x, eps)


def _expanded_bounds(
    x: torch.Tensor, bounds: tuple[npt.ArrayLike, npt.ArrayLike] | None
) -> tuple[torch.Tensor, torch.Tensor]:
    if bounds is None:
        inf = torch.full_like(x, math.inf)
        return -inf, inf
    lo, hi = (as_tensor(b).expand_as(x) for b in bounds)
    # The clean point is always feasible
    return torch.minimum(lo, x), torch.maximum(hi, x)


# -----------------------------
# MMD
# -----------------------------
def median_bandwidth(samples: torch.Tensor) -> torch.Tensor:
    """Median pairwise distance among samples (n, *batch, d); 1 where degenerate."""
    n = samples.shape[0]
    diffs = samples.unsqueeze(0) - samples.unsqueeze(1)
    dists = torch.linalg.vector_norm(diffs, dim=-1)
    iu = torch.triu_indices(n, n, offset=1)
    pairs = dists[iu[0], iu[1]]
    med = pairs.median(dim=0).values
    return torch.where(med > 0, med, torch.ones_like(med))


def mmd_linear(samples_p: torch.Tensor, samples_q: torch.Tensor, bandwidth: float | torch.Tensor) -> torch.Tensor:
    """
    Linear-time unbiased MMD^2 with an RBF kernel.

    Samples have shape (n, *batch, d) with n even; consecutive sample pairs
    form the independent terms of the estimator.
    """
    n = samples_p.shape[0]
    if n % 2 or samples_q.shape[0] != n:
        msg = f"Linear MMD needs the same even number of samples on both sides, got {n} and {samples_q.shape[0]}"
        logger.error(msg)
        raise ValueError(msg)
    bw = as_tensor(bandwidth)

    def k(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return torch.exp(-((a - b) ** 2).sum(-1) / (2.0 * bw**2))

    xa, xb = samples_p[0::2], samples_p[1::2]
    ya, yb = samples_q[0::2], samples_q[1::2]
    return (k(xa, xb) + k(ya, yb) - k(xa, yb) - k(xb, ya)).mean(0)


def mmd_objective(
    est: Estimator,
    x: npt.ArrayLike | torch.Tensor,
    x_pert: torch.Tensor,
    stream: RandomStream,
    n: int = 10,
    bandwidth: float | torch.Tensor | None = None,
) -> torch.Tensor:
    """
    Linear-time MMD^2 between q(. | x) and q(. | x_pert), differentiable in x_pert.

    Both sample sets reuse one standard-normal draw (common random numbers),
    so x_pert = x gives exactly 0. The RBF bandwidth defaults to the median
    heuristic on the clean samples.
    """
    if n < 2 or n % 2:
        msg = f"n must be even and >= 2, got {n}"
        logger.error(msg)
        raise ValueError(msg)
    with torch.no_grad():
        clean = est(as_tensor(x))
    eps = torch.from_numpy(standard_normal(stream, (n, *clean.mean.shape)))
    clean_samples = reparam_transform(clean, eps)
    if bandwidth is None:
        bandwidth = median_bandwidth(clean_samples)
    return mmd_linear(clean_samples, reparam_transform(est(x_pert), eps), bandwidth)


# -----------------------------
# Objectives
# -----------------------------
Objective = Callable[[torch.Tensor, tuple[object, ...], int], torch.Tensor]


def _row_normals(streams: Sequence[RandomStream], tag: tuple[object, ...], shape: tuple[int, ...]) -> torch.Tensor:
    # One draw per row from that row's own substream, stacked on axis 1
    draws = [standard_normal(s.substream(*tag), shape) for s in streams]
    return torch.from_numpy(np.stack(draws, axis=1))


def _build_objective(
    est: Estimator,
    x: torch.Tensor,
    cfg: AttackConfig,
    streams: Sequence[RandomStream],
    theta: torch.Tensor | None,
) -> Objective:
    with torch.no_grad():
        clean: GaussianPosterior = est(x)
    d = clean.dim

    if cfg.kind == "nll":
        if theta is None:
            msg = "nll attack needs the true parameters"
            logger.error(msg)
            raise ValueError(msg)
        return lambda xp, tag, n: -log_prob(est(xp), theta)

    if cfg.kind == "mmd":
        bw = median_bandwidth(reparam_transform(clean, _row_normals(streams, ("bandwidth",), (cfg.mmd_samples, d))))

        def mmd(xp: torch.Tensor, tag: tuple[object, ...], n: int) -> torch.Tensor:
            eps = _row_normals(streams, tag, (n, d))
            return mmd_linear(reparam_transform(clean, eps), reparam_transform(est(xp), eps), bw)

        return mmd

    forward = cfg.kind == "pgd_kl_forward"
    if cfg.closed_form:
        if forward:
            return lambda xp, tag, n: kl_gaussian(clean, est(xp))
        return lambda xp, tag, n: kl_gaussian(est(xp), clean)

    def kl_mc(xp: torch.Tensor, tag: tuple[object, ...], n: int) -> torch.Tensor:
        pert = est(xp)
        eps = _row_normals(streams, tag, (n, d))
        p, q = (clean, pert) if forward else (pert, clean)
        th = reparam_transform(p, eps)
        return (log_prob(p, th) - log_prob(q, th)).mean(0)

    return kl_mc


def _value_and_grad(
    objective: Objective, x: torch.Tensor, delta: torch.Tensor, tag: tuple[object, ...], n: int
) -> tuple[torch.Tensor, torch.Tensor]:
    d = delta.detach().clone().requires_grad_(True)
    value = objective(x + d, tag, n)
    (grad,) = torch.autograd.grad(value.sum(), d)
    return value.detach(), grad


def _init_deltas(
    streams: Sequence[RandomStream], tag: tuple[object, ...], dim: int, radius: float
) -> torch.Tensor:
    draws = [uniform_ball(s.substream(*tag), 1, dim, radius)[0] for s in streams]
    return torch.from_numpy(np.stack(draws))


# -----------------------------
# Projected gradient ascent
# -----------------------------
@dataclass
class _PgdOutcome:
    delta: torch.Tensor
    best: torch.Tensor
    trace: list[torch.Tensor] = field(default_factory=list)
    lo: torch.Tensor | None = None
    hi: torch.Tensor | None = None


def _pgd(
    objective: Objective,
    x: torch.Tensor,
    cfg: AttackConfig,
    streams: Sequence[RandomStream],
    bounds: tuple[npt.ArrayLike, npt.ArrayLike] | None,
) -> _PgdOutcome:
    n_step = cfg.mmd_samples if cfg.kind == "mmd" else cfg.mc_per_step
    step_size = cfg.resolved_step_size
    lo, hi = _expanded_bounds(x, bounds)
    dim = x.shape[-1]

    delta = _feasible(x, _init_deltas(streams, ("init",), dim, INIT_RADIUS * cfg.eps), cfg.eps, lo, hi)
    value, grad = _value_and_grad(objective, x, delta, ("step", 0), n_step)

    for k in range(1, cfg.restarts + 1):
        dead = torch.linalg.vector_norm(grad, dim=-1) < ZERO_GRAD_TOL
        if not bool(dead.any()):
            break
        rows = torch.nonzero(dead).flatten().tolist()
        msg = f"Vanishing objective gradient at initialization for {len(rows)} point(s); restart {k}"
        logger.warning(msg)
        warnings.warn(msg, ZeroGradientWarning, stacklevel=3)
        fresh = _init_deltas([streams[i] for i in rows], ("restart", k), dim, INIT_RADIUS * cfg.eps)
        delta = delta.clone()
        delta[rows] = _feasible(x[rows], fresh, cfg.eps, lo[rows], hi[rows])
        value, grad = _value_and_grad(objective, x, delta, ("step", 0), n_step)

    out = _PgdOutcome(delta=delta.clone(), best=value.clone(), lo=lo, hi=hi)
    for t in range(1, cfg.steps + 1):
        norms = torch.linalg.vector_norm(grad, dim=-1, keepdim=True)
        direction = torch.where(norms > 0, grad / norms.clamp_min(torch.finfo(grad.dtype).tiny), torch.zeros_like(grad))
        delta = _feasible(x, delta + step_size * direction, cfg.eps, lo, hi)
        value, grad = _value_and_grad(objective, x, delta, ("step", t), n_step)

        improved = value > out.best
        out.best = torch.where(improved, value, out.best)
        out.delta = torch.where(improved.unsqueeze(-1), delta, out.delta)
        out.trace.append(out.best.clone())
    return out


def _attack_rows(
    est: Estimator,
    xs: npt.NDArray[np.float64],
    cfg: AttackConfig,
    bounds: tuple[npt.ArrayLike, npt.ArrayLike] | None,
    streams: Sequence[RandomStream],
    thetas: npt.NDArray[np.float64] | None,
    indices: Sequence[int],
) -> list[AttackResult]:
    x = as_tensor(xs)
    theta = None if thetas is None else as_tensor(thetas)
    objective = _build_objective(est, x, cfg, streams, theta)
    out = _pgd(objective, x, cfg, streams, bounds)

    final = out.best
    if cfg.uses_monte_carlo:
        with torch.no_grad():
            final = objective(x + out.delta, ("final",), cfg.mc_final)

    x_adv = (x + out.delta).numpy()
    lo, hi = out.lo.numpy(), out.hi.numpy()
    deltas = out.delta.numpy()
    trace = torch.stack(out.trace, dim=1).numpy() if out.trace else np.zeros((len(indices), 0))

    results = []
    for row, idx in enumerate(indices):
        clamped = bool(np.any((x_adv[row] <= lo[row]) & (deltas[row] < 0)) or np.any((x_adv[row] >= hi[row]) & (deltas[row] > 0)))
        results.append(
            AttackResult(
                delta=deltas[row].copy(),
                x_perturbed=x_adv[row].copy(),
                objective_trace=[float(v) for v in trace[row]],
                final_objective=float(final[row]),
                clamped=clamped,
                point_index=int(idx),
            )
        )
    return results


def pgd_attack(
    est: Estimator,
    x: npt.ArrayLike,
    cfg: AttackConfig,
    bounds: tuple[npt.ArrayLike, npt.ArrayLike] | None = None,
    *,
    theta_true: npt.ArrayLike | None = None,
    stream: RandomStream | None = None,
) -> AttackResult:
    """
    L2 projected gradient ascent on the configured objective for one observation.

    Each step moves delta by step_size along the normalized gradient,
    projects onto the eps-ball, clamps x + delta into `bounds` and
    re-projects. The best iterate over all steps is returned.

    Args:
        est: Estimator under attack (read-only).
        x: Clean observation (x_dim,).
        cfg: Attack configuration; kind must be a PGD kind.
        bounds: (x_min, x_max) box for the perturbed observation, widened to include x.
        theta_true: Ground-truth parameters, required for the nll objective.
        stream: Random stream for initialization and Monte Carlo draws
            (defaults to RandomStream(cfg.seed)).

    Returns:
        AttackResult with a non-decreasing best-so-far objective trace.
    """
    if cfg.kind not in PGD_KINDS:
        msg = f"pgd_attack does not handle attack kind '{cfg.kind}'"
        logger.error(msg)
        raise ValueError(msg)
    xs = np.asarray(x, dtype=np.float64)[None, :]
    thetas = None if theta_true is None else np.asarray(theta_true, dtype=np.float64)[None, :]
    return _attack_rows(est, xs, cfg, bounds, [stream or RandomStream(cfg.seed)], thetas, [0])[0]


def perturb_batch(
    est: Estimator,
    x: torch.Tensor,
    cfg: AttackConfig,
    stream: RandomStream,
    *,
    theta: torch.Tensor | None = None,
    bounds: tuple[npt.ArrayLike, npt.ArrayLike] | None = None,
) -> torch.Tensor:
    """Adversarial inputs for a training minibatch (detached, shape of x)."""
    streams = [stream.substream("row", i) for i in range(x.shape[0])]
    objective = _build_objective(est, x.detach(), cfg, streams, theta)
    out = _pgd(objective, x.detach(), cfg, streams, bounds)
    return (x.detach() + out.delta).detach()


def random_l2(
    x: npt.ArrayLike,
    eps: float,
    stream: RandomStream,
    bounds: tuple[npt.ArrayLike, npt.ArrayLike] | None = None,
    est: Estimator | None = None,
) -> AttackResult:
    """
    Random perturbation of norm exactly eps (before clamping).

    When an estimator is given, final_objective is the forward KL between
    the clean and perturbed posteriors; otherwise it is NaN.
    """
    if eps <= 0:
        msg = f"eps must be > 0, got {eps}"
        logger.error(msg)
        raise ValueError(msg)
    x = np.asarray(x, dtype=np.float64)
    delta = uniform_sphere(stream, 1, x.shape[0], eps)[0]

    x_t = as_tensor(x)
    lo, hi = _expanded_bounds(x_t, bounds)
    x_adv = torch.clamp(x_t + as_tensor(delta), lo, hi).numpy()
    clamped = bool(np.any(x_adv != x + delta))

    kl = math.nan
    if est is not None:
        with torch.no_grad():
            kl = float(kl_gaussian(est(x_t), est(as_tensor(x_adv))))
    return AttackResult(
        delta=x_adv - x,
        x_perturbed=x_adv,
        objective_trace=[kl],
        final_objective=kl,
        clamped=clamped,
    )


# -----------------------------
# Batches of held-out points
# -----------------------------
def _failed(idx: int, dim: int, error: Exception) -> AttackResult:
    nan = np.full(dim, np.nan)
    return AttackResult(nan, nan.copy(), [], math.nan, False, point_index=idx, error=f"{type(error).__name__}: {error}")


def batch_attack(
    est: Estimator,
    ds: Dataset,
    cfg: AttackConfig,
    n_points: int,
    *,
    workers: int = 1,
) -> list[AttackResult]:
    """
    Attack the first n_points observations of a held-out dataset.

    Points are processed in fixed chunks of cfg.chunk_size, fanned out over
    `workers` threads; point i always draws from (cfg.seed, "point", i), so
    results do not depend on the worker count. A failing point is recorded
    with its error instead of aborting the batch.
    """
    if n_points > ds.n:
        msg = f"n_points={n_points} exceeds the {ds.n} held-out rows"
        logger.error(msg)
        raise ValueError(msg)
    if n_points <= 0:
        return []

    base = RandomStream(cfg.seed)
    bounds = (ds.x_min, ds.x_max)
    chunks = [list(range(s, min(s + cfg.chunk_size, n_points))) for s in range(0, n_points, cfg.chunk_size)]

    def run_random(idx: int) -> AttackResult:
        res = random_l2(ds.xs[idx], cfg.eps, base.substream("point", idx), bounds, est)
        res.point_index = idx
        return res

    def run_chunk(rows: list[int]) -> list[AttackResult]:
        if cfg.kind == "random_l2":
            return [run_random(i) for i in rows]
        streams = [base.substream("point", i) for i in rows]
        thetas = ds.thetas[rows] if cfg.kind == "nll" else None
        try:
            return _attack_rows(est, ds.xs[rows], cfg, bounds, streams, thetas, rows)
        except (ArithmeticError, ValueError, RuntimeError) as e:
            logger.warning("Attack chunk starting at point %d failed (%s); retrying points one by one", rows[0], e)

        results = []
        for i, s in zip(rows, streams):
            try:
                theta = None if thetas is None else ds.thetas[[i]]
                results.extend(_attack_rows(est, ds.xs[[i]], cfg, bounds, [s], theta, [i]))
            except (ArithmeticError, ValueError, RuntimeError) as e:
                logger.warning("Attack on point %d failed: %s", i, e)
                results.append(_failed(i, ds.task.x_dim, e))
        return results

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_chunk = list(pool.map(run_chunk, chunks))

    results = [r for chunk in per_chunk for r in chunk]
    n_failed = sum(not r.ok for r in results)
    logger.info(
        "Attack %s eps=%.4g on %d point(s): %d failed",
        cfg.kind,
        cfg.eps,
        n_points,
        n_failed,
    )
    return results
