"""Direct depth-field descent on the full training objective.

Depth is parameterised by a logit field ``x``: ``depth = depth_from_sigmoid(sigmoid(x))``.
The gradient is a central finite difference per pixel. Every loss term at a
pixel only depends on depths within ``SUPPORT_RADIUS`` of it, so pixels on a
lattice of spacing ``2 * SUPPORT_RADIUS + 1`` can be perturbed together and
their loss changes read back from disjoint windows. The result is the same
per-coordinate central difference as :func:`~priordepth.harness.fd.fd_gradient`
at a fraction of the cost.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import depth_from_sigmoid, sigmoid_from_depth
from ..losses import (
    EmptySupportError,
    LossBreakdown,
    LossWeights,
    SblConfig,
    identity_error,
    reprojection_loss,
    reprojection_terms,
    sbl,
    sbl_anchor_terms,
    sbl_anchors,
    smoothness_loss,
    smoothness_terms,
)
from .scene import SyntheticScene

ARMIJO_C = 1e-4
MAX_HALVINGS = 20
LINE_SEARCH_CHUNKS = [3]  # split points of the trial sequence


class OptimizationDiverged(FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"loss became {value} at step {step}; aborting")
        self.step = step


@dataclass(frozen=True)
class OptimConfig:
    steps: int = 200
    step_size: float = 500.0
    fd_epsilon: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    init_depth: float = 7.0
    init_jitter: float = 0.0  # std of logit noise added to the initial field
    feature_gain: float = 1.0
    # blur widths (px) of the candidate descent directions, 0 = raw gradient
    scales: tuple = (3.0, 0.0)
    # blur widths used to carve the gradient into block-move regions
    region_scales: tuple = ()
    semantic_moves: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.fd_epsilon > 0:
            raise ValueError(f"fd_epsilon must be positive, got {self.fd_epsilon}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if not self.scales or any(s < 0 for s in self.scales):
            raise ValueError(f"scales must be a non-empty tuple of widths >= 0, got {self.scales}")
        if not self.init_depth > 0:
            raise ValueError(f"init_depth must be positive, got {self.init_depth}")


def logits_from_depth(depth):
    s = sigmoid_from_depth(depth)
    return np.log(s) - np.log1p(-s)


def depth_from_logits(x):
    x = np.asarray(x, dtype=np.float64)
    return depth_from_sigmoid(0.5 * (1.0 + np.tanh(0.5 * x)))


def _blur(a, sigma):
    """Separable truncated Gaussian with zero padding (a symmetric operator)."""
    r = int(math.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    h, w = a.shape[-2:]
    p = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(r, r), (r, r)])
    out = sum(k[i] * p[..., :, i:i + w] for i in range(2 * r + 1))
    return sum(k[i] * out[..., i:i + h, :] for i in range(2 * r + 1))


def connected_regions(classes):
    """Label 4-connected regions of equal ``classes`` values; labels are 0..n-1."""
    h, w = classes.shape
    labels = np.arange(h * w).reshape(h, w)
    same_x = classes[:, 1:] == classes[:, :-1]
    same_y = classes[1:, :] == classes[:-1, :]
    while True:
        prev = labels
        labels = labels.copy()
        m = np.minimum(labels[:, 1:], labels[:, :-1])
        labels[:, 1:] = np.where(same_x, np.minimum(labels[:, 1:], m), labels[:, 1:])
        labels[:, :-1] = np.where(same_x, np.minimum(labels[:, :-1], m), labels[:, :-1])
        m = np.minimum(labels[1:, :], labels[:-1, :])
        labels[1:, :] = np.where(same_y, np.minimum(labels[1:, :], m), labels[1:, :])
        labels[:-1, :] = np.where(same_y, np.minimum(labels[:-1, :], m), labels[:-1, :])
        if np.array_equal(labels, prev):
            break
    return np.unique(labels, return_inverse=True)[1].reshape(h, w)


def _project(g, labels):
    labels = labels.ravel()
    sums = np.bincount(labels, weights=g.ravel())
    counts = np.bincount(labels)
    return (sums / counts)[labels].reshape(g.shape)


def flat_zone_direction(g, x, split=False, tol=1e-9):
    """Average ``g`` over the connected zones where ``x`` is constant.

    With ``split`` the zones are further cut by the sign of ``g``, so a zone
    whose pixels pull in opposite directions can tear along that line.
    """
    zones = connected_regions(np.round(x / tol))
    if split:
        zones = connected_regions(2 * zones + (g > 0))
    return _project(g, zones)


def region_direction(g, sigma):
    """Average ``g`` over the connected sign regions of the blurred gradient.

    This is an orthogonal projection onto fields that are constant on each
    region, so ``g . d = |d|^2 >= 0``. Moving a region as a block leaves the
    differences inside it, and hence the smoothness there, unchanged.
    """
    return _project(g, connected_regions(_blur(g, sigma) > 0 if sigma > 0 else g > 0))


def descent_direction(g, sigma):
    """``B B g`` for a Gaussian blur ``B``; ``g . (B B g) = |B g|^2 >= 0``."""
    if sigma <= 0:
        return g
    return _blur(_blur(g, sigma), sigma)


def _box_sum(a, r):
    """Sum over a ``(2r+1)^2`` window on the last two axes, zero outside."""
    pad = [(0, 0)] * (a.ndim - 2) + [(r + 1, r), (r + 1, r)]
    c = np.pad(a, pad).cumsum(-2).cumsum(-1)
    k = 2 * r + 1
    return c[..., k:, k:] - c[..., :-k, k:] - c[..., k:, :-k] + c[..., :-k, :-k]


class DepthObjective:
    """Weighted reprojection + smoothness + SBL loss as a function of depth logits.

    SBL features per pixel are ``(gain * (disp - ref) / ref, 1)`` where ``ref``
    is the disparity of the initial field, held fixed during optimisation.
    """

    SUPPORT_RADIUS = 2

    def __init__(self, scene: SyntheticScene, weights=LossWeights(), ref_disp=None,
                 feature_gain=1.0, sbl_config=SblConfig()):
        self.scene = scene
        self.weights = weights
        self.target = scene.target[0].astype(np.float64)
        self.sources = [s[0].astype(np.float64) for s in scene.sources]
        self.poses = scene.poses
        self.K = scene.intrinsics
        self.semantic = np.ascontiguousarray(scene.semantic, dtype=np.int64)
        self.sbl_config = sbl_config
        if sbl_config.patch // 2 > self.SUPPORT_RADIUS:
            raise ValueError("SBL patch wider than the finite-difference support")
        self.anchors = sbl_anchors(self.semantic, sbl_config)
        self.id_err = identity_error(self.target, self.sources)
        h, w = scene.shape
        self.ref_disp = np.full((h, w), 1.0 / 7.0) if ref_disp is None else np.asarray(ref_disp, float)
        self.feature_gain = float(feature_gain)

    # -- per-pixel term maps ---------------------------------------------------

    def features(self, disp):
        rel = self.feature_gain * (disp - self.ref_disp) / self.ref_disp
        return np.stack([rel, np.ones_like(rel)], axis=-3)

    def term_maps(self, x):
        """Per-pixel additive pieces of every loss numerator and denominator.

        ``x`` is ``(b, h, w)``; returns a dict of ``(b, h, w)`` arrays.
        """
        depth = depth_from_logits(x)
        err, inc = reprojection_terms(self.target, self.sources, depth, self.poses, self.K,
                                      id_err=self.id_err)
        disp = 1.0 / depth
        tx, ty = smoothness_terms(disp, self.target)
        b, h, w = x.shape
        sx = np.zeros((b, h, w))
        sy = np.zeros((b, h, w))
        sx[:, :, :-1] = tx
        sy[:, :-1, :] = ty
        anchor = np.zeros((b, h, w))
        if len(self.anchors):
            terms = sbl_anchor_terms(self.features(disp), self.semantic, self.sbl_config, self.anchors)
            anchor[:, self.anchors[:, 0], self.anchors[:, 1]] = terms
        return {"err": err, "inc": inc.astype(np.float64), "sx": sx, "sy": sy,
                "disp": disp, "sbl": anchor}

    def _combine(self, s):
        """Total loss from map sums; entries may be arrays (one per variant)."""
        h, w = self.scene.shape
        n_inc = s["inc"]
        with np.errstate(divide="ignore", invalid="ignore"):
            rl = np.where(n_inc > 0, s["err"] / n_inc, np.nan)
            sl = (s["sx"] / (h * (w - 1)) + s["sy"] / ((h - 1) * w)) / (s["disp"] / (h * w))
        sb = s["sbl"] / len(self.anchors) if len(self.anchors) else 0.0 * rl
        wt = self.weights
        return wt.w_reproj * rl + wt.w_smooth * sl + wt.w_sbl * sb

    def total_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        maps = self.term_maps(x if x.ndim == 3 else x[None])
        return self._combine({k: v.sum(axis=(-2, -1)) for k, v in maps.items()})

    def total(self, x):
        return float(self.total_batch(np.asarray(x, dtype=np.float64)[None])[0])

    def breakdown(self, x):
        """Loss components through the public loss functions."""
        depth = depth_from_logits(x)
        try:
            rl = reprojection_loss(self.target, self.sources, depth, self.poses, self.K)[0]
        except EmptySupportError:
            rl = math.nan
        disp = 1.0 / depth
        sl = float(smoothness_loss(disp, self.target))
        sb = sbl(self.features(disp), self.semantic, self.sbl_config)
        return LossBreakdown(rl, sl, sb, self.weights)

    # -- gradient ----------------------------------------------------------------

    def gradient(self, x, eps=1e-3):
        """Per-pixel central differences, all pixels of one lattice class at a time."""
        x = np.asarray(x, dtype=np.float64)
        h, w = x.shape
        r = self.SUPPORT_RADIUS
        k = 2 * r + 1
        yy, xx = np.mgrid[0:h, 0:w]
        classes = [(a, b) for a in range(min(k, h)) for b in range(min(k, w))]
        masks = np.stack([((yy % k) == a) & ((xx % k) == b) for a, b in classes])
        batch = np.concatenate([x + eps * masks, x - eps * masks])
        base = self.term_maps(x[None])
        pert = self.term_maps(batch)
        n = len(classes)
        sums = {}
        for key in base:
            total0 = base[key].sum()
            local = _box_sum(pert[key] - base[key], r)  # (2n, h, w)
            sums[key] = total0 + local
        f = self._combine(sums)  # (2n, h, w), valid at each class's own pixels
        diff = (f[:n] - f[n:]) / (2.0 * eps)
        grad = np.where(masks, diff, 0.0).sum(axis=0)
        return grad


@dataclass
class OptimResult:
    trajectory: list  # LossBreakdown per step, index 0 is the initial field
    accepted: list  # bool per step
    step_sizes: list
    moves: list  # name of the direction taken per step, "" if none passed
    logits: np.ndarray
    depth: np.ndarray

    def csv(self):
        lines = [LossBreakdown.CSV_HEADER]
        lines += [b.csv_row(i) for i, b in enumerate(self.trajectory)]
        return "\n".join(lines) + "\n"

    @property
    def totals(self):
        return [b.total for b in self.trajectory]


def initial_logits(shape, cfg: OptimConfig):
    x = np.full(shape, float(logits_from_depth(cfg.init_depth)))
    if cfg.init_jitter > 0:
        x += np.random.default_rng(cfg.seed).normal(0.0, cfg.init_jitter, size=shape)
    return x


def _line_search(obj, x, f, g, d, trial):
    """Halve ``trial`` until the Armijo condition holds; returns ``(step, x, f)`` or None.

    Trial points are evaluated in batches; the first (largest) passing step wins,
    exactly as in a sequential search.
    """
    slope = float((g * d).sum())
    if not slope > 0:
        return None
    steps = trial / 2.0 ** np.arange(MAX_HALVINGS + 1)
    for chunk in np.split(steps, LINE_SEARCH_CHUNKS):
        values = obj.total_batch(x[None] - chunk[:, None, None] * d[None])
        ok = np.isfinite(values) & (values <= f - ARMIJO_C * chunk * slope)
        if ok.any():
            i = int(np.argmax(ok))
            return float(chunk[i]), x - chunk[i] * d, float(values[i])
    return None


def _disparity_scale(x):
    """``1 / (d disp / d x)`` up to a constant, capped where the sigmoid saturates."""
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    slope = sig * (1.0 - sig)
    return slope.mean() / np.maximum(slope, 1e-3 * slope.mean())


def optimize_depth(scene: SyntheticScene, cfg: OptimConfig = OptimConfig(), init=None, callback=None):
    """Backtracking descent on depth logits from a constant (or given) depth field.

    Every step builds several candidate directions from one finite-difference
    gradient ``g``: Gaussian-blurred copies (``cfg.scales``), block moves over
    sign regions of the blurred gradient (``cfg.region_scales``), block moves
    over the semantic regions and over the flat zones of the current field.
    Each is of the form ``S P S g`` with ``P`` symmetric positive semi-definite
    and ``S`` converting logit steps to disparity steps, so ``g . d >= 0``.
    Each candidate is line-searched from twice its last accepted step and the
    one reaching the lowest loss is taken. If none passes Armijo the field
    is a fixed point of the iteration and the remaining steps are recorded
    as rejected without being recomputed.
    """
    h, w = scene.shape
    x = initial_logits((h, w), cfg) if init is None else logits_from_depth(init)
    obj = DepthObjective(scene, cfg.weights, ref_disp=1.0 / depth_from_logits(x),
                         feature_gain=cfg.feature_gain)
    f = obj.total(x)
    if not math.isfinite(f):
        raise OptimizationDiverged(0, f)
    trajectory = [obj.breakdown(x)]
    accepted, sizes, moves = [], [], []
    fixed = [(f"blur{s:g}", lambda g, x, s=s: descent_direction(g, s)) for s in cfg.scales]
    fixed += [(f"regions{s:g}", lambda g, x, s=s: region_direction(g, s)) for s in cfg.region_scales]
    if cfg.semantic_moves:
        parts = connected_regions(scene.semantic)
        fixed.append(("semantic", lambda g, x: _project(g, parts)))
    candidates = fixed + [("zones", lambda g, x: flat_zone_direction(g, x, split=True))]
    alphas = {key: cfg.step_size / 2.0 for key, _ in candidates}
    stalled = False
    for step in range(1, cfg.steps + 1):
        if stalled:
            # nothing changed since the last step, so every search fails again
            accepted.append(False)
            sizes.append(0.0)
            moves.append("")
            trajectory.append(trajectory[-1])
            if callback is not None:
                callback(step, trajectory[-1])
            continue
        g = obj.gradient(x, cfg.fd_epsilon)
        if not np.all(np.isfinite(g)):
            raise OptimizationDiverged(step, "non-finite gradient")
        scale = _disparity_scale(x)
        best, best_key = None, ""
        for key, direction in candidates:
            d = scale * direction(scale * g, x)
            found = _line_search(obj, x, f, g, d, 2.0 * alphas[key])
            if found is None:
                continue
            alphas[key] = found[0]
            if best is None or found[2] < best[2]:
                best, best_key = found, key
        if best is not None:
            _, x, f = best
        stalled = best is None
        accepted.append(best is not None)
        sizes.append(best[0] if best is not None else 0.0)
        moves.append(best_key)
        trajectory.append(obj.breakdown(x))
        if not math.isfinite(trajectory[-1].total):
            raise OptimizationDiverged(step, trajectory[-1].total)
        if callback is not None:
            callback(step, trajectory[-1])
    return OptimResult(trajectory, accepted, sizes, moves, x, depth_from_logits(x))
