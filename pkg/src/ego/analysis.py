"""Feature-similarity study across noise levels and feature-space edit metrics."""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .denoiser import Condition, Denoiser
from .image_energy import downsample_mask
from .schedule import NoiseSchedule, add_noise


def similarity(a, b, region=None) -> float:
    """Mean cosine similarity of per-point feature vectors over ``region``.

    Points where either vector has zero norm are skipped.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"feature maps must share a (D, h, w) shape: {a.shape} vs {b.shape}")
    d = a.shape[0]
    A = a.reshape(d, -1)
    B = b.reshape(d, -1)
    if region is not None:
        sel = np.flatnonzero(downsample_mask(region, a.shape[1:]))
        A, B = A[:, sel], B[:, sel]
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        raise ValueError("no point with non-zero feature vectors in the region")
    cos = np.sum(A[:, ok] * B[:, ok], axis=0) / (na[ok] * nb[ok])
    return float(np.clip(np.mean(cos), -1.0, 1.0))


@dataclass
class SimilarityPair:
    source: np.ndarray
    target: np.ndarray
    y_target: Condition


@dataclass
class CurveTable:
    t: np.ndarray
    mean_src: np.ndarray
    std_src: np.ndarray
    mean_tgt: np.ndarray
    std_tgt: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,mean_src,std_src,mean_tgt,std_tgt\n")
        for row in zip(self.t, self.mean_src, self.std_src, self.mean_tgt, self.std_tgt):
            buf.write(f"{int(row[0])}," + ",".join(f"{v:.6f}" for v in row[1:]) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CurveTable":
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        cols = np.array(rows, dtype=np.float64).T
        return cls(cols[0].astype(np.int64), *cols[1:])


def _noised(x, t, eps, sched):
    # grid point 0 means the clean image
    return np.asarray(x, eps.dtype) if t == 0 else add_noise(x, t, eps, sched)


def similarity_curve(model: Denoiser, sched: NoiseSchedule, pairs: Sequence[SimilarityPair],
                     t_grid: Sequence[int], tap: str = "dec2", seed: int = 0) -> CurveTable:
    """Query the noised source with the target condition at every grid timestep.

    At each t the source is noised and its features are read at that t under
    the target condition. They are compared with the features of the clean
    source and of the clean target, both read at t=0 under the same condition.
    Grid point 0 is the clean source itself, so source-similarity is exactly 1
    there. Returns per-t mean and standard deviation over pairs.
    """
    if not pairs:
        raise ValueError("no pairs")
    if len(t_grid) == 0:
        raise ValueError("empty timestep grid")
    rng = np.random.default_rng(seed)
    ts = np.array(sorted(int(t) for t in t_grid), dtype=np.int64)
    src_sims = np.zeros((len(ts), len(pairs)))
    tgt_sims = np.zeros((len(ts), len(pairs)))
    for j, pair in enumerate(pairs):
        src = np.asarray(pair.source, model.dtype)
        tgt = np.asarray(pair.target, model.dtype)
        F_ref = model.features(np.stack([src, tgt]), 0, pair.y_target, tap)
        for i, t in enumerate(ts):
            eps = rng.standard_normal(src.shape).astype(model.dtype)
            query = F_ref[0] if t == 0 else model.features(_noised(src, int(t), eps, sched), int(t),
                                                           pair.y_target, tap)
            src_sims[i, j] = similarity(query, F_ref[0])
            tgt_sims[i, j] = similarity(query, F_ref[1])
    return CurveTable(ts, src_sims.mean(1), src_sims.std(1), tgt_sims.mean(1), tgt_sims.std(1))


def find_crossover(table: CurveTable) -> int:
    """Largest grid t with source-similarity >= target-similarity while the next larger t reverses it."""
    t = np.asarray(table.t)
    if len(t) < 2 or np.any(np.diff(t) <= 0):
        raise ValueError("curve must be on a strictly increasing grid of at least two points")
    src_wins = np.asarray(table.mean_src) >= np.asarray(table.mean_tgt)
    for i in range(len(t) - 2, -1, -1):
        if src_wins[i] and not src_wins[i + 1]:
            return int(t[i])
    raise ValueError("source and target similarity curves do not cross")


def count_crossings(table: CurveTable) -> int:
    src_wins = np.asarray(table.mean_src) >= np.asarray(table.mean_tgt)
    return int(np.sum(src_wins[:-1] != src_wins[1:]))


@dataclass
class QualityReport:
    identity: float
    background: float

    def format(self) -> str:
        return f"identity {self.identity:.6f}\nbackground {self.background:.6f}\n"


def identity_score(F_out, F_ref, m_ori, m_ref) -> float:
    """Mean over reference-mask points of the best cosine match inside the edit mask."""
    d, h, w = F_out.shape
    ro = np.flatnonzero(downsample_mask(m_ori, (h, w)))
    rr = np.flatnonzero(downsample_mask(m_ref, (h, w)))
    if len(ro) == 0 or len(rr) == 0:
        raise ValueError("empty mask")
    A = F_out.reshape(d, -1)[:, ro].astype(np.float64)
    B = F_ref.reshape(d, -1)[:, rr].astype(np.float64)
    A /= np.maximum(np.linalg.norm(A, axis=0, keepdims=True), 1e-12)
    B /= np.maximum(np.linalg.norm(B, axis=0, keepdims=True), 1e-12)
    return float(np.mean(np.max(B.T @ A, axis=1)))


def background_score(src, out, m_ori) -> float:
    """1 - mean |out - src| outside the edit mask, normalised by the source value range."""
    src = np.asarray(src, np.float64)
    out = np.asarray(out, np.float64)
    outside = ~np.asarray(m_ori, bool)
    if not outside.any():
        return 1.0
    diff = np.abs(out - src)[:, outside]
    span = float(src.max() - src.min()) or 1.0
    return float(1.0 - diff.mean() / span)


def edit_quality(model: Denoiser, sched: NoiseSchedule, src, ref, out, m_ori, m_ref,
                 y_ref: Condition, tap: str = "dec2", t_eval: int = 200, seed: int = 1234) -> QualityReport:
    """Feature-space identity and pixel-space background preservation of an edit."""
    src = np.asarray(src, model.dtype)
    if not (np.shape(ref) == np.shape(out) == src.shape):
        raise ValueError("src, ref and out must share a shape")
    if not np.any(m_ori) or not np.any(m_ref):
        raise ValueError("empty mask")
    eps = np.random.default_rng(seed).standard_normal(src.shape).astype(model.dtype)
    batch = np.stack([_noised(out, t_eval, eps, sched), _noised(ref, t_eval, eps, sched)])
    F = model.features(batch, t_eval, y_ref, tap)
    return QualityReport(identity_score(F[0], F[1], m_ori, m_ref), background_score(src, out, m_ori))
