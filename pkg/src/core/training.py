from __future__ import annotations

# Minibatch Adam training of conditional density estimators: plain NPE,
# FIM-regularized NPE, TRADES, adversarial training and noise augmentation.
# Every variant shares one loop (shuffling, validation, early stopping,
# learning-rate fallback) and differs only in how a batch fills the gradients.

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field

from src.core.attacks import AttackConfig, perturb_batch
from src.core.errors import DivergedTraining
from src.core.estimators import (
    Estimator,
    fim_lambda_max_exact,
    fim_trace_exact,
    fim_trace_mc,
    kl_gaussian,
    log_prob,
)
from src.core.numerics import RandomStream, permutation, uniform_ball
from src.core.tasks import Dataset

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Per-task default regularization strengths (mean-loss scale)
DEFAULT_FIM_BETA: dict[str, float] = {
    "gaussian_linear": 0.001,
    "sir": 0.1,
    "lotka_volterra": 0.01,
}


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(default=512, ge=1)
    max_epochs: int = Field(default=300, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    lr_fallbacks: int = Field(default=2, ge=0)
    val_size: int = Field(default=512, ge=1)
    patience: int = Field(default=20, ge=1)
    early_stopping: bool = True
    seed: int = 0


class FimRegConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    beta: float = Field(default=0.0, ge=0)
    gamma: float = Field(default=0.85, gt=0, le=1)
    n_mc: int = Field(default=5, ge=1)
    penalty: Literal["trace_ema", "trace_exact", "lambda_max_exact"] = "trace_ema"


@dataclass
class TrainingHistory:
    epochs: list[int] = field(default_factory=list)
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_nll: float = math.inf

    def record(self, epoch: int, train_nll: float, val_nll: float, penalty: float, lr: float) -> None:
        self.epochs.append(epoch)
        self.train_nll.append(train_nll)
        self.val_nll.append(val_nll)
        self.penalty.append(penalty)
        self.lr.append(lr)

    @property
    def best_so_far(self) -> list[float]:
        """Running minimum of the validation NLL."""
        return list(np.minimum.accumulate(self.val_nll)) if self.val_nll else []

    def to_frame(self) -> pd.DataFrame:
        """Training log: epoch, train_nll, val_nll, penalty, lr."""
        return pd.DataFrame(
            {
                "epoch": self.epochs,
                "train_nll": self.train_nll,
                "val_nll": self.val_nll,
                "penalty": self.penalty,
                "lr": self.lr,
            }
        )


# (x_batch, theta_batch, batch_stream) -> (nll, penalty); fills .grad of every parameter
BatchStep = Callable[[torch.Tensor, torch.Tensor, RandomStream], tuple[float, float]]


class _NonFiniteLoss(ArithmeticError):
    pass


# -----------------------------
# Shared loop
# -----------------------------
def closed_form_beta(beta: float, n: int) -> float:
    """
    Convert a training-loop beta (mean NLL + beta * mean penalty) to the
    summed-loss scale used by the closed-form generalized-linear solution.
    """
    return beta * n


def split_train_val(ds: Dataset, cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    """The last val_size rows are the validation set."""
    if ds.n < cfg.batch_size + cfg.val_size:
        msg = f"Dataset has {ds.n} rows; need at least batch_size + val_size = {cfg.batch_size + cfg.val_size}"
        logger.error(msg)
        raise ValueError(msg)
    return ds.split(ds.n - cfg.val_size)


def _mean_nll(est: Estimator, x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    return -log_prob(est(x), theta).mean()


def _snapshot(est: Estimator) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in est.state_dict().items()}


def _run_epochs(
    est: Estimator,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    step: BatchStep,
    lr: float,
) -> TrainingHistory:
    params = [p for p in est.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    base = RandomStream(cfg.seed)

    x_train = torch.from_numpy(train.xs)
    t_train = torch.from_numpy(train.thetas)
    x_val = torch.from_numpy(val.xs)
    t_val = torch.from_numpy(val.thetas)

    history = TrainingHistory()
    with torch.no_grad():
        history.best_val_nll = float(_mean_nll(est, x_val, t_val))
    best_state = _snapshot(est)
    wait = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = torch.from_numpy(permutation(base.substream("shuffle", epoch), train.n))
        nll_sum = pen_sum = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, train.n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad(set_to_none=False)
            nll, pen = step(x_train[idx], t_train[idx], base.substream("batch", epoch, b))
            if not (math.isfinite(nll) and math.isfinite(pen)):
                raise _NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step()
            nll_sum += nll
            pen_sum += pen
            n_batches += 1

        with torch.no_grad():
            val_nll = float(_mean_nll(est, x_val, t_val))
        if not math.isfinite(val_nll):
            raise _NonFiniteLoss(f"non-finite validation loss at epoch {epoch}")
        history.record(epoch, nll_sum / n_batches, val_nll, pen_sum / n_batches, lr)
        logger.debug("epoch %d train_nll=%.5f val_nll=%.5f penalty=%.5g", epoch, nll_sum / n_batches, val_nll, pen_sum / n_batches)

        if val_nll < history.best_val_nll:
            history.best_val_nll = val_nll
            history.best_epoch = epoch
            best_state = _snapshot(est)
            wait = 0
        else:
            wait += 1
            if cfg.early_stopping and wait >= cfg.patience:
                logger.info("Early stopping at epoch %d (best epoch %d)", epoch, history.best_epoch)
                break

    if cfg.early_stopping:
        est.load_state_dict(best_state)
    return history


def _fit(
    est: Estimator,
    ds: Dataset,
    cfg: TrainConfig,
    make_step: Callable[[Estimator, Dataset], BatchStep],
    label: str,
) -> tuple[Estimator, TrainingHistory]:
    train, val = split_train_val(ds, cfg)
    initial = _snapshot(est)
    lr = cfg.lr

    for attempt in range(cfg.lr_fallbacks + 1):
        est.load_state_dict(initial)
        try:
            history = _run_epochs(est, train, val, cfg, make_step(est, train), lr)
        except _NonFiniteLoss as e:
            logger.warning("%s: %s with lr=%g; restarting at lr=%g", label, e, lr, lr / 10)
            lr /= 10
            continue
        logger.info(
            "%s finished: %d epoch(s), best epoch %d, best val NLL %.5f",
            label,
            len(history.epochs),
            history.best_epoch,
            history.best_val_nll,
        )
        return est, history

    est.load_state_dict(initial)
    msg = f"{label}: loss stayed non-finite after {cfg.lr_fallbacks} learning-rate fallback(s)"
    logger.error(msg)
    raise DivergedTraining(msg)


# -----------------------------
# Batch steps
# -----------------------------
def _npe_step(est: Estimator, train: Dataset) -> BatchStep:
    def step(x: torch.Tensor, theta: torch.Tensor, stream: RandomStream) -> tuple[float, float]:
        loss = _mean_nll(est, x, theta)
        loss.backward()
        return float(loss), 0.0

    return step


def _fim_ema_step(est: Estimator, reg: FimRegConfig) -> BatchStep:
    params = [p for p in est.parameters() if p.requires_grad]
    g = torch.zeros(sum(p.numel() for p in params), dtype=params[0].dtype)

    def flat(grads: tuple[torch.Tensor | None, ...]) -> torch.Tensor:
        return torch.cat([torch.zeros_like(p).flatten() if gr is None else gr.flatten() for p, gr in zip(params, grads)])

    def step(x: torch.Tensor, theta: torch.Tensor, stream: RandomStream) -> tuple[float, float]:
        nonlocal g
        nll = _mean_nll(est, x, theta)
        r = fim_trace_mc(est, x, stream, reg.n_mc).mean()
        grad_nll = flat(torch.autograd.grad(nll, params, allow_unused=True))
        grad_r = flat(torch.autograd.grad(r, params, allow_unused=True))

        # g <- gamma * grad r + (1 - gamma) * g, starting from g = 0
        g = reg.gamma * grad_r + (1.0 - reg.gamma) * g
        total = grad_nll + reg.beta * g
        offset = 0
        for p in params:
            p.grad = total[offset : offset + p.numel()].view_as(p).clone()
            offset += p.numel()
        return float(nll), float(r)

    return step


def _fim_exact_step(est: Estimator, reg: FimRegConfig) -> BatchStep:
    penalty_fn = fim_trace_exact if reg.penalty == "trace_exact" else fim_lambda_max_exact

    def step(x: torch.Tensor, theta: torch.Tensor, stream: RandomStream) -> tuple[float, float]:
        nll = _mean_nll(est, x, theta)
        r = penalty_fn(est, x).mean()
        (nll + reg.beta * r).backward()
        return float(nll), float(r)

    return step


# -----------------------------
# Public training entry points
# -----------------------------
def train_npe(est: Estimator, ds: Dataset, cfg: TrainConfig) -> tuple[Estimator, TrainingHistory]:
    """
    Minimize the mean NLL -log q(theta | x) by minibatch Adam.

    The last cfg.val_size rows are held out for validation; with early
    stopping the parameters of the best validation epoch are restored.

    Raises:
        DivergedTraining: If the loss is non-finite at every learning rate tried.
    """
    return _fit(est, ds, cfg, _npe_step, "NPE")


def train_fim_regularized(
    est: Estimator, ds: Dataset, cfg: TrainConfig, reg: FimRegConfig
) -> tuple[Estimator, TrainingHistory]:
    """
    NPE with a penalty on the trace (or top eigenvalue) of the input FIM.

    With the default `trace_ema` penalty each step estimates the batch-mean
    FIM trace from reg.n_mc reparameterized samples per point, keeps
    g = gamma * grad(trace) + (1 - gamma) * g, and feeds grad(NLL) + beta * g
    to Adam. beta = 0 runs exactly the plain NPE loop.
    """
    if reg.beta == 0:
        return _fit(est, ds, cfg, _npe_step, "FIM-regularized NPE (beta=0)")

    if reg.penalty == "trace_ema":
        make_step = lambda e, train: _fim_ema_step(e, reg)  # noqa: E731
    else:
        make_step = lambda e, train: _fim_exact_step(e, reg)  # noqa: E731
    return _fit(est, ds, cfg, make_step, f"FIM-regularized NPE ({reg.penalty}, beta={reg.beta:g})")


def _inner_attack_config(kind: str, attack_eps: float, attack_steps: int) -> AttackConfig:
    return AttackConfig(kind=kind, eps=attack_eps, steps=attack_steps, restarts=0)


def train_trades(
    est: Estimator,
    ds: Dataset,
    cfg: TrainConfig,
    beta: float,
    attack_eps: float,
    attack_steps: int = 20,
) -> tuple[Estimator, TrainingHistory]:
    """
    NPE plus beta * KL(q(. | x) || q(. | x_adv)), with x_adv regenerated for
    every batch by PGD on the forward KL.
    """
    if attack_eps <= 0:
        msg = f"attack_eps must be > 0, got {attack_eps}"
        logger.error(msg)
        raise ValueError(msg)
    if beta == 0:
        return _fit(est, ds, cfg, _npe_step, "TRADES (beta=0)")

    attack = _inner_attack_config("pgd_kl_forward", attack_eps, attack_steps)

    def make_step(e: Estimator, train: Dataset) -> BatchStep:
        bounds = (train.x_min, train.x_max)

        def step(x: torch.Tensor, theta: torch.Tensor, stream: RandomStream) -> tuple[float, float]:
            x_adv = perturb_batch(e, x, attack, stream.substream("attack"), bounds=bounds)
            clean = e(x)
            nll = -log_prob(clean, theta).mean()
            kl = kl_gaussian(clean, e(x_adv)).mean()
            (nll + beta * kl).backward()
            return float(nll), float(kl)

        return step

    return _fit(est, ds, cfg, make_step, f"TRADES (beta={beta:g}, eps={attack_eps:g})")


def train_adversarial(
    est: Estimator,
    ds: Dataset,
    cfg: TrainConfig,
    attack_eps: float,
    attack_steps: int = 20,
) -> tuple[Estimator, TrainingHistory]:
    """NPE evaluated at the worst-case observation in the eps-ball, found per batch by PGD on the NLL."""
    if attack_eps <= 0:
        msg = f"attack_eps must be > 0, got {attack_eps}"
        logger.error(msg)
        raise ValueError(msg)

    attack = _inner_attack_config("nll", attack_eps, attack_steps)

    def make_step(e: Estimator, train: Dataset) -> BatchStep:
        bounds = (train.x_min, train.x_max)

        def step(x: torch.Tensor, theta: torch.Tensor, stream: RandomStream) -> tuple[float, float]:
            x_adv = perturb_batch(e, x, attack, stream.substream("attack"), theta=theta, bounds=bounds)
            loss = _mean_nll(e, x_adv, theta)
            loss.backward()
            return float(loss), 0.0

        return step

    return _fit(est, ds, cfg, make_step, f"adversarial training (eps={attack_eps:g})")


def train_noise_augmented(
    est: Estimator, ds: Dataset, cfg: TrainConfig, eps: float
) -> tuple[Estimator, TrainingHistory]:
    """NPE on x + u with u uniform in the eps-ball, drawn per example and batch."""
    if eps < 0:
        msg = f"eps must be >= 0, got {eps}"
        logger.error(msg)
        raise ValueError(msg)
    if eps == 0:
        return _fit(est, ds, cfg, _npe_step, "noise-augmented NPE (eps=0)")

    def make_step(e: Estimator, train: Dataset) -> BatchStep:
        def step(x: torch.Tensor, theta: torch.Tensor, stream: RandomStream) -> tuple[float, float]:
            noise = torch.from_numpy(uniform_ball(stream.substream("noise"), x.shape[0], x.shape[1], eps))
            loss = _mean_nll(e, x + noise, theta)
            loss.backward()
            return float(loss), 0.0

        return step

    return _fit(est, ds, cfg, make_step, f"noise-augmented NPE (eps={eps:g})")
