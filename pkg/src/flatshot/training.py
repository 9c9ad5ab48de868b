"""Training objectives and the optimisation loop.

Two objectives are provided. The plain one is mean cross-entropy plus an
L2 penalty (alpha/2)||theta||^2. The flatness-seeking one replaces the
data term by its worst value in a radius-rho ball around theta,
approximated to first order: the inner maximiser is taken as
eps* = rho * g / ||g||_2 with g the data-term gradient at theta, and the
returned gradient is the data gradient evaluated at theta + eps* plus the
penalty gradient at theta (no differentiation through eps*). With rho = 0
the two objectives coincide bit for bit.

Optimisation is SGD with classical momentum (v' = m v + g, theta' =
theta - lr v') under a cosine learning-rate schedule with warm restarts.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from .data import Domain
from .errors import ConfigError, NumericError, ShapeMismatchError
from .model import (
    Batch,
    Model,
    active_mask,
    forward_backward,
    param_vector,
    unflatten,
)

OBJECTIVES = ("erm", "sam")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run (JSON keys = field names)."""

    batch_size: int = 32
    base_lr: float = 0.03
    min_lr: float = 0.0001
    total_iterations: int = 1000
    restart_period: int = 1000
    momentum: float = 0.9
    weight_decay: float = 0.0001
    rho: float = 0.05
    objective: str = "sam"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.base_lr <= 0 or self.min_lr < 0:
            raise ConfigError("base_lr must be positive and min_lr non-negative")
        if self.min_lr > self.base_lr:
            raise ConfigError("min_lr must not exceed base_lr")
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be non-negative")
        if self.restart_period < 1:
            raise ConfigError("restart_period must be positive")
        if self.total_iterations > 0 and self.restart_period > self.total_iterations:
            raise ConfigError("restart_period must not exceed total_iterations")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.rho < 0:
            raise ConfigError("rho must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class TrainHistory:
    """Per-iteration trace of one run."""

    loss: np.ndarray
    lr: np.ndarray
    grad_norm: np.ndarray
    final_params: np.ndarray
    wall_time: float


def erm_objective(model: Model, batch: Batch, weight_decay: float) -> tuple[float, np.ndarray]:
    """Mean cross-entropy + (weight_decay/2)||theta||^2 and its gradient."""
    loss, grad, _ = forward_backward(model, batch, weight_decay)
    return loss, grad


def sam_perturbation(grad: np.ndarray, rho: float) -> np.ndarray:
    """First-order worst-case perturbation: rho * grad / ||grad||_2.

    Zero when the gradient vanishes; otherwise its norm equals rho up to
    rounding.
    """
    if rho < 0:
        raise ConfigError("rho must be non-negative")
    gnorm = float(np.linalg.norm(grad))
    if rho == 0.0 or gnorm == 0.0:
        return np.zeros_like(grad)
    return (rho / gnorm) * grad


def first_order_sam(
    value_and_grad, theta: np.ndarray, rho: float, weight_decay: float = 0.0
) -> tuple[float, np.ndarray]:
    """Pluggable-loss hook for the first-order flat-minimum objective.

    ``value_and_grad(theta) -> (data_loss, data_grad)`` supplies the data
    term. Returns the objective value L(theta + eps*) + (wd/2)||theta||^2
    and gradient grad L(theta + eps*) + wd * theta.
    """
    theta = np.asarray(theta, dtype=np.float64)
    loss0, g = value_and_grad(theta)
    eps = sam_perturbation(np.asarray(g, dtype=np.float64), rho)
    if np.any(eps):
        loss_adv, g_adv = value_and_grad(theta + eps)
    else:
        loss_adv, g_adv = loss0, g
    loss = float(loss_adv) + 0.5 * weight_decay * float(theta @ theta)
    grad = np.asarray(g_adv, dtype=np.float64) + weight_decay * theta
    return loss, grad


def sam_gradient(
    model: Model, batch: Batch, rho: float, weight_decay: float
) -> tuple[float, np.ndarray]:
    """Flat-minimum objective value and gradient for a model batch.

    Delegates to :func:`erm_objective` when rho = 0 (bitwise identical
    results). The L2 penalty covers the active parameters and is taken at
    theta, not at the perturbed point.
    """
    if rho == 0.0:
        return erm_objective(model, batch, weight_decay)
    _, g, _ = forward_backward(model, batch, 0.0)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient in the perturbation step")
    eps = sam_perturbation(g, rho)
    if not np.any(eps):
        return erm_objective(model, batch, weight_decay)
    theta = param_vector(model)
    loss_adv, g_adv, _ = forward_backward(unflatten(model, theta + eps), batch, 0.0)
    if weight_decay > 0:
        mask = active_mask(model)
        loss_adv = loss_adv + 0.5 * weight_decay * float((theta * mask) @ (theta * mask))
        g_adv = g_adv + weight_decay * theta * mask
    return loss_adv, g_adv


def sgd_step(
    params: np.ndarray,
    grad: np.ndarray,
    lr: float,
    velocity: np.ndarray,
    momentum: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD-with-momentum step: v' = m v + g; params' = params - lr v'."""
    if params.shape != grad.shape or params.shape != velocity.shape:
        raise ShapeMismatchError("params, grad and velocity must share a shape")
    v = momentum * velocity + grad
    return params - lr * v, v


def cosine_lr(t: int, cfg: TrainConfig) -> float:
    """Cosine-annealed learning rate with warm restarts every restart_period."""
    if not 0 <= t < max(cfg.total_iterations, 1):
        raise ConfigError(f"iteration {t} outside [0, {cfg.total_iterations})")
    phase = (t % cfg.restart_period) / cfg.restart_period
    return float(cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + np.cos(np.pi * phase)))


def train(
    model: Model,
    dataset: Domain,
    cfg: TrainConfig,
    trainable: np.ndarray | None = None,
) -> tuple[Model, TrainHistory]:
    """Run the configured objective over uniformly resampled minibatches.

    The batch stream is drawn with replacement from a generator seeded by
    cfg.seed, so runs with equal seeds produce bit-identical histories.
    ``trainable`` optionally masks gradient coordinates (1 = update), used
    for freezing the backbone during low-rank fine-tuning.
    """
    if dataset.n < 1:
        raise ConfigError("dataset is empty")
    if model.n_classes != dataset.n_classes:
        raise ShapeMismatchError(
            f"model head has {model.n_classes} outputs, dataset has {dataset.n_classes} classes"
        )
    rng = np.random.default_rng(cfg.seed)
    theta = param_vector(model)
    if trainable is not None and trainable.shape != theta.shape:
        raise ShapeMismatchError("trainable mask must match the parameter vector")
    velocity = np.zeros_like(theta)
    labels = dataset.local_labels()

    losses = np.zeros(cfg.total_iterations)
    lrs = np.zeros(cfg.total_iterations)
    grad_norms = np.zeros(cfg.total_iterations)
    start = time.perf_counter()
    for t in range(cfg.total_iterations):
        idx = rng.integers(0, dataset.n, size=cfg.batch_size)
        batch = Batch(dataset.samples[idx], labels[idx])
        current = unflatten(model, theta)
        try:
            if cfg.objective == "sam":
                loss, grad = sam_gradient(current, batch, cfg.rho, cfg.weight_decay)
            else:
                loss, grad = erm_objective(current, batch, cfg.weight_decay)
        except NumericError as e:
            raise NumericError(f"iteration {t}: {e}") from e
        if trainable is not None:
            grad = grad * trainable
        lr = cosine_lr(t, cfg)
        theta, velocity = sgd_step(theta, grad, lr, velocity, cfg.momentum)
        losses[t] = loss
        lrs[t] = lr
        grad_norms[t] = np.linalg.norm(grad)
    history = TrainHistory(
        loss=losses,
        lr=lrs,
        grad_norm=grad_norms,
        final_params=theta.copy(),
        wall_time=time.perf_counter() - start,
    )
    return unflatten(model, theta), history
