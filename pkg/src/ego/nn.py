"""Layer primitives with hand-written backward passes.

Everything works on NHWC arrays. Each ``*_forward`` returns ``(y, cache)``
and the matching ``*_backward`` takes the upstream gradient plus that cache.
Parameter gradients are only produced when ``need_param_grads`` is set, so
input-gradient queries (feature taps) skip the weight GEMMs.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B,H,W,C) -> (B*H*W, k*k*C) patches with zero padding, ordered (ky, kx, c)."""
    pad = k // 2
    c = x.shape[-1]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # B,H,W,C,k,k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * c)


def conv2d_forward(x, weight, bias):
    """Stride-1 'same' convolution. ``weight`` has shape (k, k, C_in, C_out)."""
    k, _, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.shape[-1]}")
    b, h, w, _ = x.shape
    if k == 1:
        cols = x.reshape(b * h * w, cin)
    else:
        cols = _im2col(x, k)
    y = cols @ weight.reshape(k * k * cin, cout) + bias
    return y.reshape(b, h, w, cout), (cols, x.shape, weight)


def conv2d_backward(dy, cache, need_param_grads=False):
    cols, xshape, weight = cache
    k, _, cin, cout = weight.shape
    b, h, w, _ = xshape
    dy2 = dy.reshape(b * h * w, cout)
    if k == 1:
        dx = (dy2 @ weight.reshape(cin, cout).T).reshape(xshape)
    else:
        # transposed 'same' conv == conv with the spatially flipped, channel-swapped kernel
        flipped = weight[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
        dx = (_im2col(dy, k) @ flipped).reshape(xshape)
    if not need_param_grads:
        return dx, None, None
    dw = (cols.T @ dy2).reshape(weight.shape)
    db = dy2.sum(axis=0)
    return dx, dw, db


def _group_sum(v, groups):
    # per-channel sums over H, W (contiguous, fast) folded into per-group sums
    b, c = v.shape[0], v.shape[-1]
    return v.sum(axis=(1, 2)).reshape(b, groups, c // groups).sum(-1)


def _per_channel(g, c):
    return np.repeat(g, c // g.shape[1], axis=1)[:, None, None, :]


def group_norm_forward(x, gamma, beta, groups, eps=1e-5):
    b, h, w, c = x.shape
    n = h * w * (c // groups)
    mean = _group_sum(x, groups) / n
    d = x - _per_channel(mean, c)
    var = _group_sum(d * d, groups) / n
    inv_std = _per_channel(1.0 / np.sqrt(var + eps), c)
    xhat = d * inv_std
    y = xhat * gamma + beta
    return y, (xhat, inv_std, gamma, groups)


def group_norm_backward(dy, cache, need_param_grads=False):
    xhat, inv_std, gamma, groups = cache
    b, h, w, c = dy.shape
    n = h * w * (c // groups)
    dxhat = dy * gamma
    s1 = _per_channel(_group_sum(dxhat, groups), c)
    s2 = _per_channel(_group_sum(dxhat * xhat, groups), c)
    dx = (inv_std / n) * (n * dxhat - s1 - xhat * s2)
    if not need_param_grads:
        return dx, None, None
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dbeta = dy.sum(axis=(0, 1, 2))
    return dx, dgamma, dbeta


def _sigmoid(x):
    # tanh form is overflow-free and much faster than a masked exp
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu_forward(x):
    s = _sigmoid(x)
    return x * s, (x, s)


def silu_backward(dy, cache):
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


def avgpool2_forward(x):
    b, h, w, c = x.shape
    y = x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
    return y


def avgpool2_backward(dy):
    g = np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2)
    return g * 0.25


def upsample2_forward(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(dy):
    b, h, w, c = dy.shape
    return dy.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def linear_forward(x, weight, bias):
    return x @ weight + bias, x


def linear_backward(dy, x, weight, need_param_grads=False):
    dx = dy @ weight.T
    if not need_param_grads:
        return dx, None, None
    return dx, x.T @ dy, dy.sum(axis=0)


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)
