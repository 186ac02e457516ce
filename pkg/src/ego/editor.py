"""Coarse-to-fine latent optimisation under text and image energy guidance."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .composition import cc_due, compose
from .config import EngineConfig
from .denoiser import Condition, Denoiser
from .image_energy import (MatchMap, gaussian_kernel, ieg_grad, match_points,
                           smooth_background)
from .schedule import NoiseSchedule, add_noise
from .text_energy import teg_grad, truncate_background

log = logging.getLogger(__name__)


class EditError(RuntimeError):
    pass


@dataclass(frozen=True)
class GuidanceSchedule:
    timesteps: np.ndarray
    t_switch: int
    order: str = "descending"
    eta1: float = 1.0
    eta2: float = 1.0
    teg_cutoff: int | None = None
    # optional per-timestep factor on both weights, indexed by t
    t_weight: np.ndarray | None = None

    @property
    def N(self) -> int:
        return len(self.timesteps)

    def _w(self, t: int) -> float:
        return 1.0 if self.t_weight is None else float(self.t_weight[t])

    def text_weight(self, t: int) -> float:
        if self.teg_cutoff is not None and t < self.teg_cutoff:
            return 0.0
        return self.eta1 * self._w(t)

    def image_weight(self, t: int) -> float:
        return self.eta2 * self._w(t) if t <= self.t_switch else 0.0


def make_schedule(N: int, t_hi: int, t_lo: int, t_switch: int = 600, order: str = "descending",
                  seed: int = 0, eta1: float = 1.0, eta2: float = 1.0,
                  teg_cutoff: int | None = None, t_weight: np.ndarray | None = None) -> GuidanceSchedule:
    """N integer timesteps evenly spaced from t_hi down to t_lo.

    ``order`` other than "descending" permutes the same timesteps (ablations).
    """
    if t_hi <= t_lo:
        raise ValueError("t_hi must exceed t_lo")
    if N < 2:
        raise ValueError("need at least two steps")
    if N > t_hi - t_lo + 1:
        raise ValueError(f"cannot fit {N} distinct timesteps in [{t_lo}, {t_hi}]")
    ts = np.rint(np.linspace(t_hi, t_lo, N)).astype(np.int64)
    # rounding can collide (round-half-even); push collisions down, then back up from the end
    for i in range(1, N):
        ts[i] = min(ts[i], ts[i - 1] - 1)
    ts[-1] = max(ts[-1], t_lo)
    for i in range(N - 2, -1, -1):
        ts[i] = max(ts[i], ts[i + 1] + 1)
    if order == "ascending":
        ts = ts[::-1].copy()
    elif order == "random":
        ts = np.random.default_rng(seed).permutation(ts)
    elif order != "descending":
        raise ValueError(f"unknown order {order!r}")
    return GuidanceSchedule(ts, t_switch, order, eta1, eta2, teg_cutoff, t_weight)


def time_weighting(kind: str, sched: NoiseSchedule) -> np.ndarray | None:
    """Per-timestep factor on the guidance weights: "constant" (none) or "sds" (1 - alpha_bar_t)."""
    if kind == "constant":
        return None
    if kind == "sds":
        return 1.0 - sched.alpha_bar
    raise ValueError(f"unknown weighting {kind!r}")


def schedule_from_config(cfg: EngineConfig, sched: NoiseSchedule | None = None) -> GuidanceSchedule:
    s = cfg.schedule
    d = cfg.diffusion
    sched = sched or NoiseSchedule.linear(d.T, d.beta_start, d.beta_end)
    eta2 = cfg.image.eta if cfg.image.enabled else 0.0
    return make_schedule(s.steps, s.t_hi, s.t_lo, cfg.image.t_switch, s.order, cfg.seed,
                         cfg.text.eta, eta2, cfg.text.cutoff, time_weighting(cfg.optimizer.weighting, sched))


@dataclass
class StepRecord:
    iteration: int
    t: int
    d_text: float
    d_image: float | None
    cc_applied: bool

    @property
    def ieg_evaluated(self) -> bool:
        return self.d_image is not None


@dataclass
class EditState:
    x_opt: np.ndarray
    rng: np.random.Generator
    iteration: int = 0
    velocity: np.ndarray | None = None
    match_map: MatchMap | None = None
    records: list[StepRecord] = field(default_factory=list)


@dataclass
class EditInputs:
    src: np.ndarray
    ref: np.ndarray
    m_ori: np.ndarray
    m_ref: np.ndarray
    y_src: Condition
    y_ref: Condition
    y_neg: Condition

    def validate(self):
        if self.src.shape != self.ref.shape:
            raise ValueError(f"source {self.src.shape} and reference {self.ref.shape} differ in shape")
        for name, m in (("mask-ori", self.m_ori), ("mask-ref", self.m_ref)):
            if m.shape != self.src.shape[-2:]:
                raise ValueError(f"{name} shape {m.shape} does not match image {self.src.shape[-2:]}")
            if not m.any():
                raise ValueError(f"{name} is empty")
        for c in (self.y_src, self.y_ref, self.y_neg):
            if not c.is_category:
                raise ValueError("source, reference and negative conditions must be categories")


def edit_step(state: EditState, schedule: GuidanceSchedule, inputs: EditInputs,
              model: Denoiser, sched: NoiseSchedule, cfg: EngineConfig) -> EditState:
    """One guided update of ``state.x_opt`` (in place on the state) and its log record."""
    i = state.iteration
    if i >= schedule.N:
        raise EditError("schedule exhausted")
    t = int(schedule.timesteps[i])
    x = state.x_opt
    eps = state.rng.standard_normal(x.shape).astype(x.dtype)
    eps_src = None if cfg.text.share_noise else state.rng.standard_normal(x.shape).astype(x.dtype)

    w_text = schedule.text_weight(t)
    step = np.zeros_like(x)
    d_text = 0.0
    if w_text > 0:
        g_t = teg_grad(model, sched, x, inputs.src, inputs.y_src, inputs.y_ref, inputs.y_neg,
                       t, eps, cfg.text_energy, eps_src=eps_src)
        if cfg.text.truncate:
            g_t = truncate_background(g_t, inputs.m_ori)
        d_text = float(np.mean(g_t.astype(np.float64) ** 2))
        step += np.asarray(w_text, x.dtype) * g_t

    w_img = schedule.image_weight(t)
    d_image = None
    mm = None
    feat_cond = inputs.y_ref if cfg.image.condition == "reference" else Condition.unconditional()
    if w_img > 0:
        res = ieg_grad(model, sched, x, inputs.ref, t, eps, feat_cond, inputs.m_ori, inputs.m_ref,
                       tap=cfg.image.tap, metric=cfg.image.metric)
        mm, d_image = res.match_map, res.distance
        if cfg.image.smooth_radius > 0:
            k = gaussian_kernel(cfg.image.smooth_sigma, cfg.image.smooth_radius)
            g_i = smooth_background(res.grad, inputs.m_ori, k)
        else:
            g_i = truncate_background(res.grad, inputs.m_ori)
        step += np.asarray(w_img, x.dtype) * g_i

    if state.velocity is not None:
        state.velocity = np.asarray(cfg.optimizer.momentum, x.dtype) * state.velocity + step
        step = state.velocity
    x_new = x - np.asarray(cfg.optimizer.step_size, x.dtype) * step

    cc = cc_due(i, t, cfg.cc)
    if cc:
        if mm is None:
            mm = _match_only(model, sched, x, inputs, t, eps, feat_cond, cfg)
        x_new = compose(x_new, inputs.ref, mm)

    if not np.all(np.isfinite(x_new)):
        raise EditError(f"non-finite latent at iteration {i} (t={t}); "
                        f"|step| max {np.nanmax(np.abs(step)):.3g}, d_text {d_text:.3g}, d_image {d_image}")
    state.x_opt = x_new
    if mm is not None:
        state.match_map = mm
    state.records.append(StepRecord(i, t, d_text, d_image, cc))
    state.iteration = i + 1
    return state


def _match_only(model, sched, x, inputs, t, eps, feat_cond, cfg) -> MatchMap:
    tap = cfg.image.tap
    F = model.features(np.stack([add_noise(inputs.ref, t, eps, sched), add_noise(x, t, eps, sched)]),
                       t, feat_cond, tap)
    mm = match_points(F[0], F[1], inputs.m_ref, inputs.m_ori, cfg.image.metric)
    mm.t, mm.tap = t, tap
    return mm


@dataclass
class EditResult:
    x: np.ndarray
    records: list[StepRecord]
    schedule: GuidanceSchedule

    def log_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iter,t,d_text,d_image,cc\n")
        for r in self.records:
            d_img = "" if r.d_image is None else f"{r.d_image:.6g}"
            buf.write(f"{r.iteration},{r.t},{r.d_text:.6g},{d_img},{int(r.cc_applied)}\n")
        return buf.getvalue()

    @property
    def ieg_evaluations(self) -> int:
        return sum(r.ieg_evaluated for r in self.records)


def run_edit(model: Denoiser, src, ref, m_ori, m_ref, y_src: Condition, y_ref: Condition,
             y_neg: Condition | None = None, cfg: EngineConfig | None = None,
             sched: NoiseSchedule | None = None) -> EditResult:
    """Optimise the source latent towards the reference object inside ``m_ori``.

    Starts from the source itself (no inversion) and walks the configured
    timestep schedule once.
    """
    cfg = cfg or EngineConfig()
    sched = sched or NoiseSchedule.linear(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    dtype = model.dtype
    inputs = EditInputs(np.asarray(src, dtype), np.asarray(ref, dtype), np.asarray(m_ori, bool),
                        np.asarray(m_ref, bool), y_src, y_ref, y_neg or y_src)
    inputs.validate()
    schedule = schedule_from_config(cfg, sched)
    state = EditState(inputs.src.copy(), np.random.default_rng(cfg.seed))
    if cfg.optimizer.momentum > 0:
        state.velocity = np.zeros_like(state.x_opt)
    for _ in range(schedule.N):
        edit_step(state, schedule, inputs, model, sched, cfg)
    return EditResult(state.x_opt, state.records, schedule)
