"""Latent-space content composition: copy matched reference blocks into the edit."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image_energy import MatchMap, downsample_mask


@dataclass(frozen=True)
class CCConfig:
    t_start: int = 600
    t_stop: int = 500
    interval: int = 3
    enabled: bool = True

    def __post_init__(self):
        if self.t_start <= self.t_stop:
            raise ValueError("t_start must exceed t_stop")
        if self.t_stop < 0:
            raise ValueError("t_stop must be >= 0")
        if self.interval < 1:
            raise ValueError("interval must be a positive integer")


def cc_due(iteration: int, t: int, cfg: CCConfig) -> bool:
    return bool(cfg.enabled and cfg.t_stop <= t <= cfg.t_start and iteration % cfg.interval == 0)


def compose(x_opt, x_ref, mm: MatchMap) -> np.ndarray:
    """Overwrite the latent block under each p_o with the block under its p_r.

    Each lattice point owns an s x s latent block (s = latent size / lattice
    size). When several reference points map to one p_o, the one latest in
    row-major reference order wins.
    """
    x_opt = np.asarray(x_opt)
    x_ref = np.asarray(x_ref)
    if x_opt.shape != x_ref.shape:
        raise ValueError(f"shape mismatch: {x_opt.shape} vs {x_ref.shape}")
    out = x_opt.copy()
    if len(mm) == 0:
        return out
    h, w = mm.resolution
    C, H, W = x_opt.shape
    if H % h or W % w or H // h != W // w:
        raise ValueError(f"latent {H}x{W} is not an integer upscale of lattice {h}x{w}")
    n = h * w
    if (mm.ref_idx.min() < 0 or mm.opt_idx.min() < 0 or mm.ref_idx.max() >= n
            or mm.opt_idx.max() >= n):
        raise IndexError("match map index outside the lattice")
    s = H // h
    order = np.argsort(mm.ref_idx, kind="stable")
    ref, opt = mm.ref_idx[order], mm.opt_idx[order]
    # keep the last writer for each destination
    _, last_pos = np.unique(opt[::-1], return_index=True)
    keep = len(opt) - 1 - last_pos
    ref, opt = ref[keep], opt[keep]
    src_blocks = x_ref.reshape(C, h, s, w, s)
    dst_blocks = out.reshape(C, h, s, w, s)
    dst_blocks[:, opt // w, :, opt % w, :] = src_blocks[:, ref // w, :, ref % w, :]
    return out


def footprint(mask, resolution) -> np.ndarray:
    """Latent-resolution footprint of a mask after max-pooling to ``resolution``."""
    mask = np.asarray(mask, dtype=bool)
    s = mask.shape[0] // resolution[0]
    small = downsample_mask(mask, resolution)
    return np.repeat(np.repeat(small, s, axis=0), s, axis=1)
