"""Monocular depth building blocks: attention priors, a hybrid CNN/transformer
encoder with prior-guided decoder, self-supervised losses, evaluation metrics
and a finite-difference optimisation harness on synthetic scenes."""

from .kernels import BACKEND
from .geometry import CameraIntrinsics, PoseSE3, depth_from_sigmoid, inverse_warp
from .attention import cpa, factor_att, simam_energy, spa
from .losses import LossWeights, reprojection_loss, sbl, smoothness_loss, total_loss
from .metrics import MetricReport, eval_metrics
from .tensor import read_tensor, write_tensor

__all__ = [
    "BACKEND",
    "CameraIntrinsics",
    "LossWeights",
    "MetricReport",
    "PoseSE3",
    "cpa",
    "depth_from_sigmoid",
    "eval_metrics",
    "factor_att",
    "inverse_warp",
    "read_tensor",
    "reprojection_loss",
    "sbl",
    "simam_energy",
    "smoothness_loss",
    "spa",
    "total_loss",
    "write_tensor",
]

__version__ = "0.1.0"
