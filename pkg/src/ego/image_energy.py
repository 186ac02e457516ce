"""Image energy guidance: masked nearest-neighbour matching and feature distance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .denoiser import Condition, Denoiser
from .schedule import NoiseSchedule, add_noise


@dataclass
class MatchMap:
    """Reference-lattice point -> edited-lattice point correspondences.

    Indices are flat row-major positions on an (h, w) feature lattice.
    ``ref_idx`` is strictly increasing; ``opt_idx`` may repeat.
    """

    ref_idx: np.ndarray
    opt_idx: np.ndarray
    resolution: tuple[int, int]
    distances: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: int | None = None
    tap: str | None = None

    def __len__(self) -> int:
        return len(self.ref_idx)

    @property
    def pairs(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        w = self.resolution[1]
        return [((int(r) // w, int(r) % w), (int(o) // w, int(o) % w))
                for r, o in zip(self.ref_idx, self.opt_idx)]

    @classmethod
    def empty(cls, resolution) -> "MatchMap":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), tuple(resolution))

    def to_table(self) -> str:
        """Rows of ``p_r.y p_r.x p_o.y p_o.x distance``."""
        lines = ["p_r.y p_r.x p_o.y p_o.x distance"]
        dist = self.distances if len(self.distances) == len(self) else np.full(len(self), np.nan)
        for ((ry, rx), (oy, ox)), d in zip(self.pairs, dist):
            lines.append(f"{ry} {rx} {oy} {ox} {d:.6g}")
        return "\n".join(lines) + "\n"


def downsample_mask(mask, shape) -> np.ndarray:
    """Max-pool a full-resolution binary mask onto an (h, w) lattice."""
    mask = np.asarray(mask, dtype=bool)
    h, w = shape
    H, W = mask.shape
    if H % h or W % w or H // h != W // w:
        raise ValueError(f"mask {mask.shape} is not an integer upscale of lattice {shape}")
    s = H // h
    return mask.reshape(h, s, w, s).any(axis=(1, 3))


def _as_lattice_mask(mask, shape, name):
    m = downsample_mask(mask, shape)
    if not m.any():
        raise ValueError(f"{name} is empty at feature resolution {shape}")
    return m


def match_points(F_ref, F_opt, m_ref, m_ori, metric: str = "euclidean",
                 chunk: int = 256) -> MatchMap:
    """For every point of M_ref, the point of M_ori whose F_opt vector is nearest to F_ref.

    Ties go to the smallest row-major index. Masks may be given at any integer
    multiple of the feature resolution; they are max-pooled down.
    """
    F_ref = np.asarray(F_ref)
    F_opt = np.asarray(F_opt)
    if F_ref.ndim != 3 or F_opt.ndim != 3:
        raise ValueError("feature maps must be (D, h, w)")
    if F_ref.shape[0] != F_opt.shape[0]:
        raise ValueError(f"channel mismatch: {F_ref.shape[0]} vs {F_opt.shape[0]}")
    if F_ref.shape[1:] != F_opt.shape[1:]:
        raise ValueError("feature maps must share a lattice")
    d, h, w = F_ref.shape
    mr = _as_lattice_mask(m_ref, (h, w), "reference mask")
    mo = _as_lattice_mask(m_ori, (h, w), "edit mask")
    ref_idx = np.flatnonzero(mr)
    cand_idx = np.flatnonzero(mo)
    R = F_ref.reshape(d, -1)[:, ref_idx].T.astype(np.float64)
    C = F_opt.reshape(d, -1)[:, cand_idx].T.astype(np.float64)
    if metric == "cosine":
        R = R / np.maximum(np.linalg.norm(R, axis=1, keepdims=True), 1e-12)
        C = C / np.maximum(np.linalg.norm(C, axis=1, keepdims=True), 1e-12)
    elif metric != "euclidean":
        raise ValueError(f"unknown metric {metric!r}")
    best = np.empty(len(ref_idx), dtype=np.int64)
    best_d = np.empty(len(ref_idx))
    for s in range(0, len(ref_idx), chunk):
        diff = R[s:s + chunk, None, :] - C[None, :, :]
        dist = np.einsum("rcd,rcd->rc", diff, diff)
        j = np.argmin(dist, axis=1)  # first minimum == smallest row-major index
        best[s:s + chunk] = j
        best_d[s:s + chunk] = np.sqrt(dist[np.arange(len(j)), j])
    return MatchMap(ref_idx.astype(np.int64), cand_idx[best].astype(np.int64), (h, w), best_d)


def _gather(F, idx):
    d = F.shape[0]
    return F.reshape(d, -1)[:, idx]


def ieg_distance(F_opt, F_ref, mm: MatchMap) -> float:
    """Sum over pairs of ||F_opt[p_o] - F_ref[p_r]||^2."""
    F_opt = np.asarray(F_opt)
    F_ref = np.asarray(F_ref)
    if F_opt.shape[1:] != tuple(mm.resolution) or F_ref.shape[1:] != tuple(mm.resolution):
        raise ValueError("match map resolution does not match the feature maps")
    n = mm.resolution[0] * mm.resolution[1]
    if len(mm) and (mm.ref_idx.max() >= n or mm.opt_idx.max() >= n
                    or mm.ref_idx.min() < 0 or mm.opt_idx.min() < 0):
        raise IndexError("match map index outside the lattice")
    r = _gather(F_opt, mm.opt_idx).astype(np.float64) - _gather(F_ref, mm.ref_idx)
    return float(np.sum(r * r))


def ieg_cotangent(F_opt, F_ref, mm: MatchMap) -> np.ndarray:
    """d/dF_opt of the matched distance: 2 (F_opt[p_o] - F_ref[p_r]) summed onto p_o."""
    d = F_opt.shape[0]
    resid = _gather(F_opt, mm.opt_idx) - _gather(F_ref, mm.ref_idx)
    cot = np.zeros((d, F_opt.shape[1] * F_opt.shape[2]), dtype=F_opt.dtype)
    np.add.at(cot.T, mm.opt_idx, (2 * resid).T)
    return cot.reshape(F_opt.shape)


@dataclass
class IEGResult:
    grad: np.ndarray
    match_map: MatchMap
    distance: float
    F_opt: np.ndarray
    F_ref: np.ndarray


def ieg_grad(model: Denoiser, sched: NoiseSchedule, x0, x_ref0, t: int, eps,
             cond_ref: Condition, m_ori, m_ref, tap: str = "dec2", eps_ref=None,
             match_map: MatchMap | None = None, metric: str = "euclidean",
             cond_opt: Condition | None = None) -> IEGResult:
    """Image energy and its gradient with respect to the clean edited latent.

    Both images are noised to ``t`` (with the same noise unless ``eps_ref`` is
    given), features are read at ``tap``, points are matched, and the matched
    squared distance is pulled back through the tap. The matching itself is
    held fixed; pass ``match_map`` to reuse a frozen one.
    """
    x0 = np.asarray(x0)
    if x0.shape != np.shape(x_ref0) or x0.shape != np.shape(eps):
        raise ValueError("edited latent, reference latent and noise must share a shape")
    eps_ref = eps if eps_ref is None else eps_ref
    cond_opt = cond_ref if cond_opt is None else cond_opt
    x_t = add_noise(x0, t, eps, sched)
    xr_t = add_noise(x_ref0, t, eps_ref, sched)
    F_ref = model.features(xr_t, t, cond_ref, tap)
    F_opt, pullback = model.features_with_pullback(x_t, t, cond_opt, tap)
    if match_map is None:
        match_map = match_points(F_ref, F_opt, m_ref, m_ori, metric)
        match_map.t, match_map.tap = int(t), tap
    dist = ieg_distance(F_opt, F_ref, match_map)
    dx_t = pullback(ieg_cotangent(F_opt, F_ref, match_map))
    grad = np.asarray(sched.signal_scale(t), dx_t.dtype) * dx_t
    return IEGResult(grad, match_map, dist, F_opt, F_ref)


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if int(radius) != radius or radius < 1:
        raise ValueError("radius must be a positive integer")
    r = int(radius)
    ax = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth_background(grad, m_ori, kernel) -> np.ndarray:
    """grad inside the mask; the zero-padded kernel-blurred grad outside it."""
    grad = np.asarray(grad)
    m = np.asarray(m_ori, dtype=bool)
    if m.shape != grad.shape[-2:]:
        raise ValueError(f"mask {m.shape} does not match gradient spatial shape {grad.shape[-2:]}")
    k = np.asarray(kernel, dtype=np.float64)
    blurred = np.stack([ndimage.convolve(ch.astype(np.float64), k, mode="constant", cval=0.0)
                        for ch in grad.reshape(-1, *grad.shape[-2:])]).reshape(grad.shape)
    return np.where(m, grad, blurred.astype(grad.dtype))
