"""Attention priors: factorised self-attention, context prior attention (CPA)
and semantic prior attention (SPA) built on a per-neuron energy.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .tensor import (
    ConvParams,
    ShapeError,
    as_tensor4,
    batch_norm,
    conv2d,
    global_avg_pool,
    init_conv,
    sigmoid,
    softmax,
    uniform_init,
)

DEFAULT_RHO = 1e-4
DEFAULT_REDUCTION = 8


def factor_att(q, k, v, heads=1):
    """Factorised attention ``q / sqrt(C) @ (softmax(k)^T @ v)``.

    Inputs are token-major ``(..., n_tokens, dim)``. The softmax runs over the
    token axis of ``k`` independently for every embedding column. With
    ``heads > 1`` the embedding is split evenly and ``C`` is the per-head width.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key tokens {k.shape[-2]} != value tokens {v.shape[-2]}")
    c, cv = q.shape[-1], v.shape[-1]
    if c % heads or cv % heads:
        raise ShapeError(f"{heads} heads do not divide dims {c} and {cv}")
    ch, cvh = c // heads, cv // heads
    out = np.empty(q.shape[:-1] + (cv,))
    for i in range(heads):
        qs = q[..., i * ch:(i + 1) * ch]
        ks = softmax(k[..., i * ch:(i + 1) * ch], axis=-2)
        vs = v[..., i * cvh:(i + 1) * cvh]
        ctx = np.swapaxes(ks, -1, -2) @ vs  # (..., ch, cvh)
        out[..., i * cvh:(i + 1) * cvh] = (qs / np.sqrt(ch)) @ ctx
    return out.astype(np.float32)


# -- context prior attention ------------------------------------------------

def criss_cross_positions(h, w, y, x):
    """Positions of ``(y, x)``'s criss-cross set in attention-map order."""
    col = [(r, x) for r in range(h)]
    row = [(y, r) for r in range(w) if r != x]
    return col + row


def cpa_affinity(q, k):
    """Softmax over each position's ``H + W - 1`` row/column correlations.

    Returns ``(n, H + W - 1, H, W)``; slot order follows :func:`criss_cross_positions`.
    """
    q = as_tensor4(q, "query")
    k = as_tensor4(k, "key")
    if q.shape != k.shape:
        raise ShapeError(f"query {q.shape} and key {k.shape} differ")
    scores = kernels.impl.cc_scores(q.astype(np.float64), k.astype(np.float64))
    return softmax(scores, axis=1).astype(np.float32)


def cpa_aggregate(t, v):
    t = as_tensor4(t, "attention map")
    v = as_tensor4(v, "value")
    n, c, h, w = v.shape
    if t.shape != (n, h + w - 1, h, w):
        raise ShapeError(f"attention map {t.shape} does not match value grid {v.shape}")
    out = kernels.impl.cc_aggregate(t.astype(np.float64), v.astype(np.float64))
    return out.astype(np.float32)


def cpa_channel(h, w1, w2):
    """Channel gate ``sigmoid(W1 W2 gap(h))`` applied per channel.

    ``w2`` maps C -> C/2 and ``w1`` maps C/2 -> C.
    """
    h = as_tensor4(h, "feature")
    c = h.shape[1]
    if c % 2:
        raise ShapeError(f"channel branch needs an even channel count, got {c}")
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w2.shape != (c // 2, c) or w1.shape != (c, c // 2):
        raise ShapeError(f"expected w2 {(c // 2, c)} and w1 {(c, c // 2)}, got {w2.shape} and {w1.shape}")
    z = global_avg_pool(h)  # (n, c)
    z_hat = z @ w2.T @ w1.T
    gate = sigmoid(z_hat)
    return (gate[:, :, None, None] * h.astype(np.float64)).astype(np.float32)


def cpa_fuse(h_spatial, u_channel, h, g):
    h_spatial, u_channel, h = (as_tensor4(a) for a in (h_spatial, u_channel, h))
    if not (h_spatial.shape == u_channel.shape == h.shape):
        raise ShapeError(f"fusion inputs differ: {h_spatial.shape}, {u_channel.shape}, {h.shape}")
    fused = float(g) * (h_spatial.astype(np.float64) + u_channel) + h
    return fused.astype(np.float32)


@dataclass(frozen=True)
class CpaParams:
    wq: ConvParams
    wk: ConvParams
    wv: ConvParams
    w1: np.ndarray  # (C, C/2)
    w2: np.ndarray  # (C/2, C)
    g: float = 0.0

    def __post_init__(self):
        c = self.wv.in_channels
        if not np.isfinite(self.g):
            raise ValueError("fusion gain must be finite")
        if self.wv.out_channels != c:
            raise ShapeError("value projection must preserve the channel count")
        if self.wq.weight.shape[1:] != (c, 1, 1) or self.wk.weight.shape != self.wq.weight.shape:
            raise ShapeError("query/key projections must be matching 1x1 convolutions from C channels")

    @property
    def channels(self):
        return self.wv.in_channels

    @property
    def n_params(self):
        return (self.wq.n_params + self.wk.n_params + self.wv.n_params
                + np.size(self.w1) + np.size(self.w2) + 1)

    @classmethod
    def init(cls, channels, rng, reduction=DEFAULT_REDUCTION, g=0.0):
        if channels % reduction or channels % 2:
            raise ShapeError(f"channels {channels} must be divisible by {reduction} and by 2")
        cr = channels // reduction
        # bias-free projections keep a zero feature map at zero for any gain
        return cls(
            wq=_unbiased(init_conv(rng, channels, cr, 1)),
            wk=_unbiased(init_conv(rng, channels, cr, 1)),
            wv=_unbiased(init_conv(rng, channels, channels, 1)),
            w1=uniform_init(rng, (channels, channels // 2), channels // 2),
            w2=uniform_init(rng, (channels // 2, channels), channels),
            g=g,
        )


def _unbiased(p: ConvParams):
    return replace(p, bias=np.zeros_like(p.bias))


def cpa(h, params: CpaParams):
    h = as_tensor4(h, "feature")
    if h.shape[1] != params.channels:
        raise ShapeError(f"CPA expects {params.channels} channels, got {h.shape[1]}")
    q = conv2d(h, params.wq)
    k = conv2d(h, params.wk)
    v = conv2d(h, params.wv)
    spatial = cpa_aggregate(cpa_affinity(q, k), v)
    channel = cpa_channel(h, params.w1, params.w2)
    return cpa_fuse(spatial, channel, h, params.g)


# -- semantic prior attention -----------------------------------------------

@dataclass(frozen=True)
class EnergyConfig:
    rho: float = DEFAULT_RHO

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")


def simam_energy(h, cfg: EnergyConfig = EnergyConfig()):
    """Minimal neuron energy using whole-channel mean and variance."""
    h = as_tensor4(h, "feature")
    if h.shape[2] * h.shape[3] < 1:
        raise ShapeError("energy needs at least one neuron per channel")
    x = h.astype(np.float64)
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    rho = cfg.rho
    f = 4.0 * (var + rho) / ((x - mu) ** 2 + 2.0 * var + 2.0 * rho)
    return f.astype(np.float32)


def simam_energy_loo(h, cfg: EnergyConfig = EnergyConfig()):
    """Minimal neuron energy with leave-one-out statistics of the other neurons."""
    h = as_tensor4(h, "feature")
    k = h.shape[2] * h.shape[3]
    if k < 2:
        raise ShapeError("leave-one-out energy needs at least two neurons per channel")
    x = h.astype(np.float64)
    mu = x.mean(axis=(2, 3), keepdims=True)
    ss = ((x - mu) ** 2).sum(axis=(2, 3), keepdims=True)
    mu_t = (k * mu - x) / (k - 1)
    var_t = np.maximum(ss - k / (k - 1) * (x - mu) ** 2, 0.0) / (k - 1)
    rho = cfg.rho
    f = 4.0 * (var_t + rho) / ((x - mu_t) ** 2 + 2.0 * var_t + 2.0 * rho)
    return f.astype(np.float32)


def neuron_energy(w, b, t, others, rho=DEFAULT_RHO):
    """Regularised linear-separability energy of target ``t`` against ``others``."""
    others = np.asarray(others, dtype=np.float64)
    return (np.mean((-1.0 - (w * others + b)) ** 2)
            + (1.0 - (w * t + b)) ** 2 + rho * w * w)


def neuron_energy_argmin(t, others, rho=DEFAULT_RHO):
    """Closed-form ``(w, b)`` minimising :func:`neuron_energy`."""
    others = np.asarray(others, dtype=np.float64)
    mu = others.mean()
    var = others.var()
    d = t - mu
    w = 2.0 * d / (d * d + 2.0 * var + 2.0 * rho)
    b = -0.5 * (t + mu) * w
    return w, b


def simam_refine(h, f, gamma=None, beta=None, eps=1e-5):
    """Gate every neuron by ``sigmoid(1 / f)`` and batch-normalise."""
    h = as_tensor4(h, "feature")
    f = as_tensor4(f, "energy")
    if f.shape != h.shape:
        raise ShapeError(f"energy {f.shape} and feature {h.shape} differ")
    if not np.all(f > 0):
        raise ValueError("energy must be strictly positive everywhere")
    c = h.shape[1]
    gamma = np.ones(c) if gamma is None else gamma
    beta = np.zeros(c) if beta is None else beta
    gate = sigmoid(1.0 / f.astype(np.float64))
    return batch_norm(gate * h, gamma, beta, eps)


def spa(h, gamma=None, beta=None, cfg: EnergyConfig = EnergyConfig(), eps=1e-5):
    return simam_refine(h, simam_energy(h, cfg), gamma, beta, eps)
