"""Discrete DDPM noise schedule and forward noising."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        if T < 1:
            raise ValueError("T must be positive")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        alpha = 1.0 - beta
        return cls(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))

    def check_t(self, t) -> None:
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr >= self.T):
            raise ValueError(f"timestep {t} outside [0, {self.T})")

    def signal_scale(self, t) -> float:
        """sqrt(alpha_bar[t]), i.e. d x_t / d x_0."""
        self.check_t(t)
        return float(np.sqrt(self.alpha_bar[int(t)]))


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    sched.check_t(t)
    ab = sched.alpha_bar[int(t)]
    dtype = np.result_type(x0.dtype, eps.dtype)
    a = np.asarray(np.sqrt(ab), dtype=dtype)
    s = np.asarray(np.sqrt(1.0 - ab), dtype=dtype)
    return (a * x0 + s * eps).astype(dtype, copy=False)
