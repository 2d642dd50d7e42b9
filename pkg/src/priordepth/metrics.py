"""Depth evaluation: Abs Rel, Sq Rel, RMSE, RMSE log and threshold accuracies."""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

# clamping to a non-positive floor would make RMSE log undefined
MIN_CLAMP = 1e-3


@dataclass(frozen=True)
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    @classmethod
    def csv_header(cls):
        return ",".join(f.name for f in fields(cls))

    def csv_row(self):
        return ",".join(f"{v:.6f}" for v in astuple(self))

    def table(self):
        names = ["Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d<1.25", "d<1.25^2", "d<1.25^3"]
        head = " ".join(f"{n:>9}" for n in names)
        vals = " ".join(f"{v:>9.4f}" for v in astuple(self))
        return f"{head}\n{vals}"


def eval_metrics(pred, gt, valid_mask=None, median_scale=True, clamp=(0.0, 80.0)):
    """Compare predicted and ground-truth depth over the valid pixels.

    ``pred`` is optionally rescaled by ``median(gt) / median(pred)``; both maps
    are then clamped to ``clamp`` (``None`` disables clamping).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = np.ones(gt.shape, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ValueError(f"mask {mask.shape} does not match depth {gt.shape}")
    if not mask.any():
        raise ValueError("evaluation mask selects no pixels")
    d, g = pred[mask], gt[mask]
    if np.any(g <= 0):
        raise ValueError("ground truth must be positive on every valid pixel")
    if median_scale:
        d = d * (np.median(g) / np.median(d))
    if clamp is not None:
        lo, hi = max(clamp[0], MIN_CLAMP), clamp[1]
        d = np.clip(d, lo, hi)
        g = np.clip(g, lo, hi)
    if np.any(d <= 0):
        raise ValueError("prediction must be positive on valid pixels when clamping is disabled")

    diff = d - g
    ratio = np.maximum(d / g, g / d)
    return MetricReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(d) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )
