"""Denoiser training on the epsilon-prediction objective."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .denoiser import Condition, Denoiser
from .schedule import NoiseSchedule, add_noise

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def diffusion_loss(model: Denoiser, x0, cond: Condition, t: int, eps, sched: NoiseSchedule,
                   weight: Callable[[int], float] | float = 1.0) -> float:
    """w(t) * ||eps_phi(x_t, cond, t) - eps||^2 (summed, not averaged)."""
    x_t = add_noise(x0, t, eps, sched)
    pred = model.forward(x_t, t, cond)
    w = weight(t) if callable(weight) else weight
    r = pred.astype(np.float64) - np.asarray(eps, np.float64)
    return float(w * np.sum(r * r))


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 32
    lr: float = 5e-4
    p_drop: float = 0.1
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params, grads):
        self.step_count += 1
        c1 = 1 - self.b1 ** self.step_count
        c2 = 1 - self.b2 ** self.step_count
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def train_denoiser(images: np.ndarray, labels: np.ndarray, n_categories: int,
                   config: TrainConfig = TrainConfig(),
                   on_epoch: Callable[[int, float], None] | None = None,
                   init: Denoiser | None = None) -> tuple[Denoiser, list[float]]:
    """Fit a conditional noise predictor; returns the EMA model and per-epoch mean losses.

    A fraction ``p_drop`` of training examples has its label replaced by the
    unconditional token so the same network serves classifier-free guidance.
    """
    if len(images) == 0:
        raise TrainingError("empty dataset")
    if len(images) != len(labels):
        raise TrainingError("images and labels differ in length")
    sched = NoiseSchedule.linear(config.T, config.beta_start, config.beta_end)
    rng = np.random.default_rng(config.seed)
    model = init or Denoiser.create(n_categories, seed=config.seed)
    params = {k: v for k, v in model.params.items() if not k.startswith("meta.")}
    ema = {k: v.copy() for k, v in model.params.items()}
    opt = Adam(params, config.lr)
    sqrt_ab = np.sqrt(sched.alpha_bar).astype(np.float32)
    sqrt_1m = np.sqrt(1.0 - sched.alpha_bar).astype(np.float32)
    images = images.astype(np.float32)
    n = len(images)
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x0 = images[idx]
            b = len(idx)
            t = rng.integers(0, sched.T, size=b)
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            cidx = labels[idx].copy()
            cidx[rng.random(b) < config.p_drop] = model.null_index
            x_t = sqrt_ab[t][:, None, None, None] * x0 + sqrt_1m[t][:, None, None, None] * eps
            loss, grads = model.loss_and_grads(x_t, t, cidx, eps)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if gnorm > config.grad_clip:
                scale = np.float32(config.grad_clip / gnorm)
                for g in grads.values():
                    g *= scale
            opt.step(params, grads)
            # warm-up so short runs are not dominated by the initial weights
            d = np.float32(min(config.ema_decay, (1 + opt.step_count) / (10 + opt.step_count)))
            for k, v in params.items():
                ema[k] *= d
                ema[k] += (1 - d) * v
            losses.append(loss)
        mean = float(np.mean(losses))
        history.append(mean)
        log.info("epoch %d mean loss %.5f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    if config.ema_decay > 0:
        return Denoiser(ema, model.groups), history
    return model, history
