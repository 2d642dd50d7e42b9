"""Training objective: photometric reprojection, edge-aware smoothness and the
semantic boundary loss (SBL), plus their weighted combination.

Image-like inputs are ``(..., c, h, w)`` arrays and depth/disparity maps are
``(..., h, w)``; leading batch dimensions broadcast. Everything here runs in
float64 so finite-difference gradients of the losses stay clean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import CameraIntrinsics, inverse_warp

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PHOTO_ALPHA = 0.85


class EmptySupportError(ValueError):
    pass


def _box3(x):
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(x, pad, mode="reflect")
    h, w = x.shape[-2:]
    acc = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            acc += p[..., dy:dy + h, dx:dx + w]
    return acc / 9.0


def ssim(a, b):
    """Per-pixel SSIM with a 3x3 mean window and reflected borders."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-3:] != b.shape[-3:]:
        raise ValueError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    a, b = np.broadcast_arrays(a, b)
    mu_a, mu_b = _box3(a), _box3(b)
    var_a = _box3(a * a) - mu_a**2
    var_b = _box3(b * b) - mu_b**2
    cov = _box3(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def photometric_error(pred, target, alpha=PHOTO_ALPHA):
    """``alpha * (1 - SSIM) / 2 + (1 - alpha) * |pred - target|``, channel-averaged."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    l1 = np.abs(pred - target).mean(axis=-3)
    if alpha == 0:
        return l1
    s = ((1.0 - ssim(pred, target)) / 2.0).mean(axis=-3)
    return alpha * s + (1.0 - alpha) * l1


def identity_error(target, sources, alpha=PHOTO_ALPHA):
    """Per-pixel minimum photometric error of the unwarped sources."""
    return np.min([photometric_error(s, target, alpha) for s in sources], axis=0)


def reprojection_terms(target, sources, depth, poses, K: CameraIntrinsics,
                       alpha=PHOTO_ALPHA, id_err=None):
    """Minimum warped error per pixel and the auto-mask of pixels it counts on.

    A pixel counts when at least one warp lands inside the source and the
    warped error does not exceed the error of the unwarped sources.
    """
    if len(sources) == 0 or len(sources) != len(poses):
        raise ValueError(f"need >= 1 source with one pose each, got {len(sources)} and {len(poses)}")
    best = None
    for src, pose in zip(sources, poses):
        warped, valid = inverse_warp(src, depth, K, pose)
        e = np.where(valid, photometric_error(warped, target, alpha), np.inf)
        best = e if best is None else np.minimum(best, e)
    if id_err is None:
        id_err = identity_error(target, sources, alpha)
    included = np.isfinite(best) & (best <= id_err)
    return np.where(included, best, 0.0), included


def reprojection_loss(target, sources, depth, poses, K: CameraIntrinsics, alpha=PHOTO_ALPHA):
    """Returns ``(loss, per_pixel_error, included_mask)`` for a single depth map."""
    err, included = reprojection_terms(target, sources, depth, poses, K, alpha)
    n = int(included.sum())
    if n == 0:
        raise EmptySupportError("empty reprojection support")
    return float(err.sum() / n), err, included


def _image_grad_weights(image):
    img = np.asarray(image, dtype=np.float64)
    wx = np.exp(-np.abs(np.diff(img, axis=-1)).mean(axis=-3))
    wy = np.exp(-np.abs(np.diff(img, axis=-2)).mean(axis=-3))
    return wx, wy


def smoothness_terms(disp, image):
    """Unnormalised edge-aware terms ``|dx d| e^-|dx I|`` and ``|dy d| e^-|dy I|``."""
    d = np.asarray(disp, dtype=np.float64)
    if d.shape[-2:] != np.shape(image)[-2:]:
        raise ValueError(f"disparity {d.shape[-2:]} and image {np.shape(image)[-2:]} differ in size")
    wx, wy = _image_grad_weights(image)
    return np.abs(np.diff(d, axis=-1)) * wx, np.abs(np.diff(d, axis=-2)) * wy


def smoothness_loss(disp, image):
    """Edge-aware smoothness of mean-normalised disparity."""
    d = np.asarray(disp, dtype=np.float64)
    m = d.mean(axis=(-2, -1))
    if np.any(m == 0):
        raise ValueError("mean disparity is zero; cannot normalise")
    tx, ty = smoothness_terms(d, image)
    return (tx.mean(axis=(-2, -1)) + ty.mean(axis=(-2, -1))) / m


# -- semantic boundary loss ---------------------------------------------------

@dataclass(frozen=True)
class SblConfig:
    patch: int = 5
    margin: float = 0.65
    min_count: int = 4
    stride: int = 1

    def __post_init__(self):
        if self.patch < 3 or self.patch % 2 == 0:
            raise ValueError(f"patch must be odd and >= 3, got {self.patch}")
        if not self.margin > 0 or self.min_count < 1 or self.stride < 1:
            raise ValueError("need margin > 0, min_count >= 1, stride >= 1")


def sbl_anchors(semantic, cfg: SblConfig = SblConfig()):
    """Anchors whose patch holds more than ``min_count`` positives and negatives.

    Candidates are pixels whose full patch lies inside the map, on a grid of
    ``cfg.stride``. The anchor itself is not counted as a positive.
    Returns ``(m, 2)`` int64 (row, col) in row-major order.
    """
    lab = np.asarray(semantic)
    h, w = lab.shape
    half = cfg.patch // 2
    ys = np.arange(half, h - half, cfg.stride)
    xs = np.arange(half, w - half, cfg.stride)
    if ys.size == 0 or xs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    centre = lab[gy, gx]
    n_pos = np.zeros(gy.shape, dtype=np.int64)
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            if dy or dx:
                n_pos += lab[gy + dy, gx + dx] == centre
    n_neg = cfg.patch * cfg.patch - 1 - n_pos
    keep = (n_pos > cfg.min_count) & (n_neg > cfg.min_count)
    return np.stack([gy[keep], gx[keep]], axis=1).astype(np.int64)


def normalize_features(features):
    f = np.asarray(features, dtype=np.float64)
    norm = np.sqrt((f * f).sum(axis=-3, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("degenerate feature: zero-norm feature vector")
    return f / norm


def sbl_anchor_terms(features, semantic, cfg: SblConfig = SblConfig(), anchors=None):
    """Per-anchor ``d+ + [s - d-]_+`` for features ``(b, d, h, w)``; returns ``(b, m)``."""
    f = normalize_features(features)
    if f.ndim == 3:
        f = f[None]
    lab = np.ascontiguousarray(semantic, dtype=np.int64)
    if f.shape[-2:] != lab.shape:
        raise ValueError(f"features {f.shape[-2:]} and semantic map {lab.shape} differ in size")
    if anchors is None:
        anchors = sbl_anchors(lab, cfg)
    return kernels.impl.sbl_anchor_terms(np.ascontiguousarray(f), lab, np.ascontiguousarray(anchors),
                                          cfg.patch // 2, float(cfg.margin))


def sbl(features, semantic, cfg: SblConfig = SblConfig()):
    """Semantic boundary loss; 0 when no patch straddles a boundary."""
    terms = sbl_anchor_terms(features, semantic, cfg)
    if terms.shape[0] != 1:
        raise ValueError("sbl takes a single feature map; use sbl_anchor_terms for batches")
    if terms.shape[1] == 0:
        return 0.0
    return float(terms[0].sum() / terms.shape[1])


# -- combination --------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    w_reproj: float = 1.0
    w_smooth: float = 1.0
    w_sbl: float = 0.1

    def __post_init__(self):
        for v in (self.w_reproj, self.w_smooth, self.w_sbl):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weights must be finite and >= 0, got {self}")


@dataclass(frozen=True)
class LossBreakdown:
    reproj: float
    smooth: float
    sbl: float
    weights: LossWeights

    @property
    def weighted(self):
        w = self.weights
        return (w.w_reproj * self.reproj, w.w_smooth * self.smooth, w.w_sbl * self.sbl)

    @property
    def total(self):
        a, b, c = self.weighted
        return a + b + c

    CSV_HEADER = "step,L_rl,L_sl,L_sbl,total"

    def csv_row(self, step):
        return f"{step},{self.reproj:.17g},{self.smooth:.17g},{self.sbl:.17g},{self.total:.17g}"


def total_loss(components, weights: LossWeights = LossWeights()):
    """Weighted sum of ``(L_rl, L_sl, L_sbl)``; returns ``(total, breakdown)``."""
    rl, sl, sb = (float(c) for c in components)
    b = LossBreakdown(rl, sl, sb, weights)
    return b.total, b
