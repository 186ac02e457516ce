"""Text energy guidance: SDS / DDS residuals, negative prompt term, background truncation.

All gradients follow the score-distillation convention: the denoiser Jacobian
is dropped and the (guided) noise residual, times d x_t / d x_0 = sqrt(abar_t),
is used as the gradient with respect to the clean latent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import Condition, Denoiser, cfg_eps
from .schedule import NoiseSchedule, add_noise


@dataclass(frozen=True)
class TextEnergyConfig:
    omega: float = 7.5
    lambda_neg: float = 0.3
    share_noise: bool = True

    def __post_init__(self):
        if not self.omega >= 0:
            raise ValueError("omega must be >= 0")
        if not 0.0 <= self.lambda_neg <= 1.0:
            raise ValueError("lambda_neg must lie in [0, 1]")


def _check_same(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch between {what}: {np.shape(a)} vs {np.shape(b)}")


def sds_grad(model: Denoiser, sched: NoiseSchedule, x, cond: Condition, t: int, eps,
             omega: float) -> np.ndarray:
    """sqrt(abar_t) * (eps^omega(x_t, cond, t) - eps)."""
    _check_same(x, eps, "latent and noise")
    x_t = add_noise(x, t, eps, sched)
    scale = np.asarray(sched.signal_scale(t), dtype=x_t.dtype)
    return scale * (cfg_eps(model, x_t, cond, t, omega) - eps.astype(x_t.dtype))


def dds_grad(model: Denoiser, sched: NoiseSchedule, x, x_src, y_ref: Condition,
             y_src: Condition, t: int, eps, omega: float, eps_src=None) -> np.ndarray:
    """Delta denoising score: the target SDS gradient minus the source one.

    Both terms share ``eps`` unless ``eps_src`` is given, so the prompt-agnostic
    part of the residual cancels.
    """
    _check_same(x, x_src, "edited and source latents")
    eps_src = eps if eps_src is None else eps_src
    return (sds_grad(model, sched, x, y_ref, t, eps, omega)
            - sds_grad(model, sched, x_src, y_src, t, eps_src, omega))


def negative_residual(model: Denoiser, sched: NoiseSchedule, x, y_neg: Condition, t: int,
                      eps) -> np.ndarray:
    """eps(x_t, t) - eps(x_t, y_neg, t), raw (unguided) predictions."""
    if not y_neg.is_category:
        raise ValueError("negative prompt must be a category condition")
    x_t = add_noise(x, t, eps, sched)
    both = model.forward(np.stack([x_t, x_t]), t, [Condition.unconditional(), y_neg])
    return both[0] - both[1]


def teg_grad(model: Denoiser, sched: NoiseSchedule, x, x_src, y_src: Condition,
             y_ref: Condition, y_neg: Condition, t: int, eps,
             cfg: TextEnergyConfig = TextEnergyConfig(), eps_src=None) -> np.ndarray:
    """Gradient of the text energy with respect to the edited latent.

    dds_grad(x, x_src; y_ref, y_src) + lambda_neg * sqrt(abar_t) * (eps(x_t) - eps(x_t, y_neg)).
    """
    _check_same(x, x_src, "edited and source latents")
    _check_same(x, eps, "latent and noise")
    if not y_neg.is_category:
        raise ValueError("negative prompt must be a category condition")
    if eps_src is None and not cfg.share_noise:
        raise ValueError("share_noise is off: pass a separate eps_src")
    g = dds_grad(model, sched, x, x_src, y_ref, y_src, t, eps, cfg.omega,
                 eps_src=None if cfg.share_noise else eps_src)
    if cfg.lambda_neg == 0.0:
        return g
    scale = np.asarray(cfg.lambda_neg * sched.signal_scale(t), dtype=g.dtype)
    return g + scale * negative_residual(model, sched, x, y_neg, t, eps)


def truncate_background(grad, mask) -> np.ndarray:
    """grad * M, broadcast over channels; exactly zero outside the mask."""
    grad = np.asarray(grad)
    mask = np.asarray(mask)
    if mask.shape != grad.shape[-2:]:
        raise ValueError(f"mask {mask.shape} does not match gradient spatial shape {grad.shape[-2:]}")
    return np.where(mask.astype(bool), grad, np.zeros((), grad.dtype))
