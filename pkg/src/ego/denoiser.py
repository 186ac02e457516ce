"""Small class-conditional U-Net noise predictor with feature taps.

The network is a three-level convolutional encoder/decoder (32/64/128
channels) with skip connections. A sinusoidal timestep embedding, summed with
a learned category embedding, is injected into every residual block.
Activations of the three decoder blocks are exposed as feature taps:

    dec3  (128 ch, H/4)    dec2  (64 ch, H/2)    dec1  (32 ch, H)

Gradients are written out by hand, block by block. Public tensors use the
(C, H, W) / (B, C, H, W) layout; internally everything is NHWC.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn

TAPS = ("dec3", "dec2", "dec1")
TAP_SCALE = {"dec3": 4, "dec2": 2, "dec1": 1}
DOWNSAMPLE = 4

_BLOCKS = ("enc1", "enc2", "mid", "dec3", "dec2", "dec1")


@dataclass(frozen=True)
class Condition:
    kind: str  # "category" | "unconditional"
    category_id: int = -1

    @classmethod
    def category(cls, category_id: int) -> "Condition":
        if category_id < 0:
            raise ValueError("category id must be non-negative")
        return cls("category", int(category_id))

    @classmethod
    def unconditional(cls) -> "Condition":
        return cls("unconditional")

    @property
    def is_category(self) -> bool:
        return self.kind == "category"

    def __post_init__(self):
        if self.kind not in ("category", "unconditional"):
            raise ValueError(f"unknown condition kind {self.kind!r}")


def _block_channels(channels):
    c1, c2, c3 = channels
    return {
        "enc1": (c1, c1),
        "enc2": (c1, c2),
        "mid": (c2, c3),
        "dec3": (c3, c3),
        "dec2": (c3 + c2, c2),
        "dec1": (c2 + c1, c1),
    }


def init_params(n_categories: int, in_channels: int = 3, channels=(32, 64, 128),
                emb_dim: int = 128, time_dim: int = 64, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def conv(name, k, cin, cout, scale=1.0):
        std = scale * np.sqrt(2.0 / (k * k * cin))
        p[name + ".w"] = (rng.standard_normal((k, k, cin, cout)) * std).astype(np.float32)
        p[name + ".b"] = np.zeros(cout, np.float32)

    def lin(name, din, dout):
        p[name + ".w"] = (rng.standard_normal((din, dout)) * np.sqrt(1.0 / din)).astype(np.float32)
        p[name + ".b"] = np.zeros(dout, np.float32)

    def gn(name, c):
        p[name + ".g"] = np.ones(c, np.float32)
        p[name + ".b"] = np.zeros(c, np.float32)

    p["meta.config"] = np.array([n_categories, in_channels, *channels, emb_dim, time_dim], np.float32)
    lin("time.l1", time_dim, emb_dim)
    lin("time.l2", emb_dim, emb_dim)
    p["cat.emb"] = (rng.standard_normal((n_categories + 1, emb_dim)) * 0.5).astype(np.float32)
    conv("in", 3, in_channels, channels[0])
    for name, (cin, cout) in _block_channels(channels).items():
        conv(f"{name}.conv1", 3, cin, cout)
        gn(f"{name}.gn1", cout)
        lin(f"{name}.emb", emb_dim, cout)
        conv(f"{name}.conv2", 3, cout, cout, scale=0.5)
        gn(f"{name}.gn2", cout)
        if cin != cout:
            conv(f"{name}.skip", 1, cin, cout)
    gn("out.gn", channels[0])
    conv("out", 3, channels[0], in_channels, scale=0.1)
    return p


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got shape {x.shape}")
    return x, False


class Denoiser:
    """Noise predictor eps_phi(x_t, cond, t).

    Forward passes keep no state on the instance, so one Denoiser can be
    shared across threads.
    """

    def __init__(self, params: dict[str, np.ndarray], groups: int = 8):
        self.params = params
        cfg = params["meta.config"].astype(int)
        self.n_categories = int(cfg[0])
        self.in_channels = int(cfg[1])
        self.channels = tuple(int(c) for c in cfg[2:5])
        self.emb_dim = int(cfg[5])
        self.time_dim = int(cfg[6])
        self.groups = groups
        self.block_channels = _block_channels(self.channels)

    @classmethod
    def create(cls, n_categories: int, seed: int = 0, **kw) -> "Denoiser":
        return cls(init_params(n_categories, seed=seed, **kw))

    @property
    def dtype(self):
        return self.params["in.w"].dtype

    def astype(self, dtype) -> "Denoiser":
        return Denoiser({k: v.astype(dtype) for k, v in self.params.items()}, self.groups)

    @property
    def null_index(self) -> int:
        return self.n_categories

    def cond_index(self, cond) -> int:
        if isinstance(cond, (int, np.integer)):
            idx = int(cond)
        elif cond.is_category:
            idx = cond.category_id
            if idx >= self.n_categories:
                raise ValueError(f"category {idx} outside vocabulary of {self.n_categories}")
        else:
            idx = self.null_index
        if not 0 <= idx <= self.null_index:
            raise ValueError(f"condition index {idx} out of range")
        return idx

    def _cond_indices(self, cond, batch: int) -> np.ndarray:
        if isinstance(cond, (Condition, int, np.integer)):
            return np.full(batch, self.cond_index(cond), dtype=np.int64)
        idx = np.array([self.cond_index(c) for c in cond], dtype=np.int64)
        if idx.shape != (batch,):
            raise ValueError("one condition per batch element required")
        return idx

    def feature_shape(self, tap: str, height: int, width: int) -> tuple[int, int, int]:
        self._check_tap(tap)
        depth = {"dec3": self.channels[2], "dec2": self.channels[1], "dec1": self.channels[0]}[tap]
        s = TAP_SCALE[tap]
        return depth, height // s, width // s

    @staticmethod
    def _check_tap(tap: str) -> None:
        if tap not in TAPS:
            raise ValueError(f"unknown feature tap {tap!r}; choose from {TAPS}")

    # -- embedding -------------------------------------------------------

    def _embed(self, t: np.ndarray, cidx: np.ndarray, keep: bool):
        p = self.params
        sin = nn.timestep_embedding(t, self.time_dim, self.dtype)
        h1, c1 = nn.linear_forward(sin, p["time.l1.w"], p["time.l1.b"])
        a1, ca = nn.silu_forward(h1)
        h2, c2 = nn.linear_forward(a1, p["time.l2.w"], p["time.l2.b"])
        emb = h2 + p["cat.emb"][cidx]
        act, cact = nn.silu_forward(emb)
        cache = (c1, ca, c2, cidx, cact) if keep else None
        return act, cache

    def _embed_backward(self, dact, cache, grads):
        p = self.params
        c1, ca, c2, cidx, cact = cache
        demb = nn.silu_backward(dact, cact)
        g = np.zeros_like(p["cat.emb"])
        np.add.at(g, cidx, demb)
        grads["cat.emb"] += g
        da1, dw, db = nn.linear_backward(demb, c2, p["time.l2.w"], True)
        grads["time.l2.w"] += dw
        grads["time.l2.b"] += db
        dh1 = nn.silu_backward(da1, ca)
        _, dw, db = nn.linear_backward(dh1, c1, p["time.l1.w"], True)
        grads["time.l1.w"] += dw
        grads["time.l1.b"] += db

    # -- residual block --------------------------------------------------

    def _block(self, name, x, emb_act, keep):
        p = self.params
        h1, cc1 = nn.conv2d_forward(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
        n1, cg1 = nn.group_norm_forward(h1, p[f"{name}.gn1.g"], p[f"{name}.gn1.b"], self.groups)
        e, ce = nn.linear_forward(emb_act, p[f"{name}.emb.w"], p[f"{name}.emb.b"])
        s1, cs1 = nn.silu_forward(n1 + e[:, None, None, :])
        h2, cc2 = nn.conv2d_forward(s1, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"])
        n2, cg2 = nn.group_norm_forward(h2, p[f"{name}.gn2.g"], p[f"{name}.gn2.b"], self.groups)
        s2, cs2 = nn.silu_forward(n2)
        if f"{name}.skip.w" in p:
            sk, csk = nn.conv2d_forward(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"])
        else:
            sk, csk = x, None
        cache = (cc1, cg1, ce, cs1, cc2, cg2, cs2, csk) if keep else None
        return s2 + sk, cache

    def _block_backward(self, name, dout, cache, grads):
        """Returns (dx, d emb_act or None). Parameter grads go into ``grads`` if given."""
        p = self.params
        want = grads is not None
        cc1, cg1, ce, cs1, cc2, cg2, cs2, csk = cache
        dn2 = nn.silu_backward(dout, cs2)
        dh2, dg, db = nn.group_norm_backward(dn2, cg2, want)
        if want:
            grads[f"{name}.gn2.g"] += dg
            grads[f"{name}.gn2.b"] += db
        ds1, dw, db = nn.conv2d_backward(dh2, cc2, want)
        if want:
            grads[f"{name}.conv2.w"] += dw
            grads[f"{name}.conv2.b"] += db
        da1 = nn.silu_backward(ds1, cs1)
        dh1, dg, db = nn.group_norm_backward(da1, cg1, want)
        demb = None
        if want:
            grads[f"{name}.gn1.g"] += dg
            grads[f"{name}.gn1.b"] += db
            de = da1.sum(axis=(1, 2))
            demb, dw, db = nn.linear_backward(de, ce, p[f"{name}.emb.w"], True)
            grads[f"{name}.emb.w"] += dw
            grads[f"{name}.emb.b"] += db
        dx, dw, db = nn.conv2d_backward(dh1, cc1, want)
        if want:
            grads[f"{name}.conv1.w"] += dw
            grads[f"{name}.conv1.b"] += db
        if csk is None:
            dx = dx + dout
        else:
            dsk, dw, db = nn.conv2d_backward(dout, csk, want)
            dx = dx + dsk
            if want:
                grads[f"{name}.skip.w"] += dw
                grads[f"{name}.skip.b"] += db
        return dx, demb

    # -- whole network ---------------------------------------------------

    def _run(self, x_nchw, t, cidx, stop: str | None, keep: bool):
        """Forward to ``stop`` (a tap name) or to the output when ``stop`` is None."""
        p = self.params
        x = np.ascontiguousarray(np.transpose(x_nchw, (0, 2, 3, 1)), dtype=self.dtype)
        _, h, w, _ = x.shape
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"spatial size {h}x{w} must be a multiple of {DOWNSAMPLE}")
        emb, cemb = self._embed(t, cidx, keep)
        caches = {"emb": cemb}
        acts = {}
        h0, caches["in"] = nn.conv2d_forward(x, p["in.w"], p["in.b"])
        e1, caches["enc1"] = self._block("enc1", h0, emb, keep)
        e2, caches["enc2"] = self._block("enc2", nn.avgpool2_forward(e1), emb, keep)
        m, caches["mid"] = self._block("mid", nn.avgpool2_forward(e2), emb, keep)
        d3, caches["dec3"] = self._block("dec3", m, emb, keep)
        acts["dec3"] = d3
        if stop == "dec3":
            return acts, caches
        u3 = nn.upsample2_forward(d3)
        d2, caches["dec2"] = self._block("dec2", np.concatenate([u3, e2], axis=-1), emb, keep)
        acts["dec2"] = d2
        if stop == "dec2":
            return acts, caches
        u2 = nn.upsample2_forward(d2)
        d1, caches["dec1"] = self._block("dec1", np.concatenate([u2, e1], axis=-1), emb, keep)
        acts["dec1"] = d1
        if stop == "dec1":
            return acts, caches
        n, caches["out.gn"] = nn.group_norm_forward(d1, p["out.gn.g"], p["out.gn.b"], self.groups)
        s, caches["out.silu"] = nn.silu_forward(n)
        out, caches["out"] = nn.conv2d_forward(s, p["out.w"], p["out.b"])
        acts["out"] = out
        return acts, caches

    def _backward(self, grad_at: str, g, caches, grads=None):
        """Backpropagate ``g`` (NHWC) from activation ``grad_at`` down to the input."""
        want = grads is not None
        c1, c2, _ = self.channels
        demb_total = None

        def acc_emb(d):
            nonlocal demb_total
            if d is not None:
                demb_total = d if demb_total is None else demb_total + d

        d_d1 = d_d2 = d_d3 = None
        d_e1 = d_e2 = 0.0
        if grad_at == "out":
            ds, dw, db = nn.conv2d_backward(g, caches["out"], want)
            if want:
                grads["out.w"] += dw
                grads["out.b"] += db
            dn = nn.silu_backward(ds, caches["out.silu"])
            d_d1, dg, db = nn.group_norm_backward(dn, caches["out.gn"], want)
            if want:
                grads["out.gn.g"] += dg
                grads["out.gn.b"] += db
        elif grad_at == "dec1":
            d_d1 = g
        elif grad_at == "dec2":
            d_d2 = g
        elif grad_at == "dec3":
            d_d3 = g
        else:
            raise ValueError(grad_at)

        if d_d1 is not None:
            dcat, de = self._block_backward("dec1", d_d1, caches["dec1"], grads)
            acc_emb(de)
            d_d2 = nn.upsample2_backward(dcat[..., :c2])
            d_e1 = dcat[..., c2:]
        if d_d2 is not None:
            dcat, de = self._block_backward("dec2", d_d2, caches["dec2"], grads)
            acc_emb(de)
            d_d3 = nn.upsample2_backward(dcat[..., :self.channels[2]])
            d_e2 = dcat[..., self.channels[2]:]
        dm, de = self._block_backward("dec3", d_d3, caches["dec3"], grads)
        acc_emb(de)
        dpool2, de = self._block_backward("mid", dm, caches["mid"], grads)
        acc_emb(de)
        d_e2 = d_e2 + nn.avgpool2_backward(dpool2)
        dpool1, de = self._block_backward("enc2", d_e2, caches["enc2"], grads)
        acc_emb(de)
        d_e1 = d_e1 + nn.avgpool2_backward(dpool1)
        dh0, de = self._block_backward("enc1", d_e1, caches["enc1"], grads)
        acc_emb(de)
        dx, dw, db = nn.conv2d_backward(dh0, caches["in"], want)
        if want:
            grads["in.w"] += dw
            grads["in.b"] += db
            self._embed_backward(demb_total, caches["emb"], grads)
        return np.transpose(dx, (0, 3, 1, 2))

    # -- public API ------------------------------------------------------

    def _prep(self, x, t, cond):
        xb, single = _as_batch(x)
        if xb.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {xb.shape[1]}")
        b = xb.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (b,)) if np.ndim(t) == 0 \
            else np.asarray(t, dtype=np.int64)
        if t_arr.shape != (b,):
            raise ValueError("one timestep per batch element required")
        return xb, single, t_arr, self._cond_indices(cond, b)

    def forward(self, x, t, cond) -> np.ndarray:
        """Predicted noise, same shape as ``x``."""
        xb, single, t_arr, cidx = self._prep(x, t, cond)
        acts, _ = self._run(xb, t_arr, cidx, None, keep=False)
        out = np.transpose(acts["out"], (0, 3, 1, 2))
        return out[0] if single else out

    __call__ = forward

    def features(self, x, t, cond, tap: str) -> np.ndarray:
        """Decoder activation at ``tap``, shape (D, h, w) (batched if ``x`` is)."""
        self._check_tap(tap)
        xb, single, t_arr, cidx = self._prep(x, t, cond)
        acts, _ = self._run(xb, t_arr, cidx, tap, keep=False)
        f = np.transpose(acts[tap], (0, 3, 1, 2))
        return f[0] if single else f

    def feature_vjp(self, x, t, cond, tap: str, upstream) -> tuple[np.ndarray, np.ndarray]:
        """Features at ``tap`` and J^T upstream with respect to ``x``."""
        self._check_tap(tap)
        xb, single, t_arr, cidx = self._prep(x, t, cond)
        ub = np.asarray(upstream)
        if single:
            ub = ub[None]
        acts, caches = self._run(xb, t_arr, cidx, tap, keep=True)
        f = acts[tap]
        if ub.shape != (f.shape[0], f.shape[3], f.shape[1], f.shape[2]):
            raise ValueError(f"upstream shape {np.shape(upstream)} does not match tap {tap} features")
        g = np.ascontiguousarray(np.transpose(ub, (0, 2, 3, 1)), dtype=self.dtype)
        dx = self._backward(tap, g, caches)
        f = np.transpose(f, (0, 3, 1, 2))
        return (f[0], dx[0]) if single else (f, dx)

    def features_with_pullback(self, x, t, cond, tap: str):
        """Features at ``tap`` plus a function mapping a cotangent to J^T cotangent.

        Lets callers build the cotangent from the features themselves without
        a second forward pass.
        """
        self._check_tap(tap)
        xb, single, t_arr, cidx = self._prep(x, t, cond)
        acts, caches = self._run(xb, t_arr, cidx, tap, keep=True)
        f = np.transpose(acts[tap], (0, 3, 1, 2))

        def pullback(upstream):
            ub = np.asarray(upstream)
            if single:
                ub = ub[None]
            if ub.shape != f.shape:
                raise ValueError(f"upstream shape {np.shape(upstream)} does not match tap {tap} features")
            g = np.ascontiguousarray(np.transpose(ub, (0, 2, 3, 1)), dtype=self.dtype)
            dx = self._backward(tap, g, caches)
            return dx[0] if single else dx

        return (f[0] if single else f), pullback

    def feature_input_gradient(self, x, t, cond, tap: str, upstream) -> np.ndarray:
        return self.feature_vjp(x, t, cond, tap, upstream)[1]

    def loss_and_grads(self, x_t, t, cidx, eps) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared noise-prediction error and its parameter gradients."""
        acts, caches = self._run(x_t, t, cidx, None, keep=True)
        target = np.transpose(eps, (0, 2, 3, 1))
        resid = acts["out"] - target
        loss = float(np.mean(resid ** 2))
        g = (2.0 / resid.size) * resid
        grads = {k: np.zeros_like(v) for k, v in self.params.items() if not k.startswith("meta.")}
        self._backward("out", g.astype(self.dtype), caches, grads)
        return loss, grads


def cfg_eps(model: Denoiser, x_t, cond: Condition, t, omega: float) -> np.ndarray:
    """omega * eps(x_t, cond, t) + (1 - omega) * eps(x_t, t)."""
    if not cond.is_category:
        raise ValueError("cfg_eps needs a category condition")
    if omega == 1.0:
        return model.forward(x_t, t, cond)
    cond_eps, unc_eps = cfg_parts(model, x_t, cond, t)
    return cfg_combine(cond_eps, unc_eps, omega)


def cfg_parts(model: Denoiser, x_t, cond: Condition, t) -> tuple[np.ndarray, np.ndarray]:
    """Conditional and unconditional predictions from one batched pass."""
    xb, single = _as_batch(x_t)
    b = xb.shape[0]
    tt = t if np.ndim(t) == 0 else np.concatenate([t, t])
    both = model.forward(np.concatenate([xb, xb]), tt, [cond] * b + [Condition.unconditional()] * b)
    cond_eps, unc_eps = both[:b], both[b:]
    if single:
        return cond_eps[0], unc_eps[0]
    return cond_eps, unc_eps


def cfg_combine(cond_eps, unc_eps, omega: float) -> np.ndarray:
    dtype = cond_eps.dtype
    return (np.asarray(omega, dtype) * cond_eps + np.asarray(1.0 - omega, dtype) * unc_eps).astype(dtype)


def extract_features(model: Denoiser, x_t, t, cond: Condition, tap: str) -> np.ndarray:
    return model.features(x_t, t, cond, tap)


def feature_input_gradient(model: Denoiser, x_t, t, cond: Condition, tap: str, upstream) -> np.ndarray:
    return model.feature_input_gradient(x_t, t, cond, tap, upstream)
