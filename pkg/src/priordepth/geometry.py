"""Pinhole camera, rigid transforms and inverse warping.

Camera convention: z forward, u (column) to the right, v (row) down. Pixel
``(u, v)`` sits at integer coordinates. Coordinate grids are laid out as
``(..., 2, h, w)`` with channel 0 = u and channel 1 = v.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_MIN_DEPTH = 0.1
DEFAULT_MAX_DEPTH = 100.0
# sampling coordinates this close to an integer are treated as lattice points
LATTICE_SNAP = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def _rodrigues(r):
    r = np.asarray(r, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(r))
    if theta == 0.0:
        return np.eye(3)
    k = r / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``p -> R p + t`` (target camera frame to source camera frame)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_axis_angle(cls, r, t=(0.0, 0.0, 0.0)):
        return cls(_rodrigues(r), t)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self):
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points):
        """Transform points laid out as ``(..., 3, h, w)``."""
        p = np.asarray(points, dtype=np.float64)
        out = np.einsum("ij,...jhw->...ihw", self.rotation, p)
        return out + self.translation.reshape(3, 1, 1)

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def pose_from_axis_angle(r, t=(0.0, 0.0, 0.0)):
    return PoseSE3.from_axis_angle(r, t)


def depth_from_sigmoid(s, d_min=DEFAULT_MIN_DEPTH, d_max=DEFAULT_MAX_DEPTH):
    """Map sigmoid outputs in [0, 1] to depth by interpolating inverse depth."""
    if not 0 < d_min < d_max:
        raise ValueError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    s = np.asarray(s, dtype=np.float64)
    lo, hi = 1.0 / d_max, 1.0 / d_min
    return 1.0 / (lo + s * (hi - lo))


def sigmoid_from_depth(depth, d_min=DEFAULT_MIN_DEPTH, d_max=DEFAULT_MAX_DEPTH):
    lo, hi = 1.0 / d_max, 1.0 / d_min
    return (1.0 / np.asarray(depth, dtype=np.float64) - lo) / (hi - lo)


def pixel_grid(h, w):
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([u, v])


def backproject(depth, K: CameraIntrinsics):
    """Depth ``(..., h, w)`` to camera-frame points ``(..., 3, h, w)``."""
    d = np.asarray(depth, dtype=np.float64)
    h, w = d.shape[-2:]
    u, v = pixel_grid(h, w)
    x = (u - K.cx) / K.fx * d
    y = (v - K.cy) / K.fy * d
    return np.stack([x, y, d], axis=-3)


def project(points, K: CameraIntrinsics, pose: PoseSE3 | None = None, image_shape=None):
    """Project points through ``pose``; returns ``(coords, mask)``.

    ``mask`` is false behind the camera (z <= 1e-6) or outside the image of
    size ``image_shape`` (defaults to the point grid's size).
    """
    p = np.asarray(points, dtype=np.float64)
    if pose is not None:
        p = pose.apply(p)
    h, w = image_shape if image_shape is not None else p.shape[-2:]
    x, y, z = p[..., 0, :, :], p[..., 1, :, :], p[..., 2, :, :]
    front = z > 1e-6
    safe_z = np.where(front, z, 1.0)
    u = _snap(K.fx * x / safe_z + K.cx)
    v = _snap(K.fy * y / safe_z + K.cy)
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    return np.stack([u, v], axis=-3), front & inside


def _snap(c):
    r = np.rint(c)
    return np.where(np.abs(c - r) < LATTICE_SNAP, r, c)


def bilinear_sample(image, coords, mask=None):
    """Sample ``image`` at ``coords`` with 4-neighbour bilinear interpolation.

    ``image`` is ``(c, h, w)`` shared by every grid, or ``(n, c, h, w)`` paired
    with coords ``(n, 2, H, W)``. Out-of-bounds or masked samples are 0 and
    flagged invalid.
    """
    img = np.asarray(image, dtype=np.float64)
    crd = np.asarray(coords, dtype=np.float64)
    hs, ws = img.shape[-2:]
    u, v = _snap(crd[..., 0, :, :]), _snap(crd[..., 1, :, :])
    valid = (u >= 0) & (u <= ws - 1) & (v >= 0) & (v <= hs - 1)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    u1 = np.minimum(u0 + 1, ws - 1)
    v1 = np.minimum(v0 + 1, hs - 1)
    fu = u - u0
    fv = v - v0

    if img.ndim == 3:
        def at(vv, uu):
            return np.moveaxis(img[:, vv, uu], 0, -3)
    elif img.ndim == 4:
        n = img.shape[0]
        if crd.ndim != 4 or crd.shape[0] != n:
            raise ValueError(f"batched image {img.shape} needs coords (n, 2, H, W), got {crd.shape}")
        b = np.arange(n).reshape(n, 1, 1)

        def at(vv, uu):
            return np.moveaxis(img[b, :, vv, uu], -1, 1)
    else:
        raise ValueError(f"image must be (c, h, w) or (n, c, h, w), got {img.shape}")

    fu = fu[..., None, :, :]
    fv = fv[..., None, :, :]
    top = at(v0, u0) + fu * (at(v0, u1) - at(v0, u0))
    bot = at(v1, u0) + fu * (at(v1, u1) - at(v1, u0))
    out = top + fv * (bot - top)
    out = np.where(valid[..., None, :, :], out, 0.0)
    return out, valid


def inverse_warp(source, depth, K: CameraIntrinsics, pose: PoseSE3):
    """Resample ``source`` (c, h, w) into the target view given target depth."""
    src = np.asarray(source)
    coords, mask = project(backproject(depth, K), K, pose, image_shape=src.shape[-2:])
    return bilinear_sample(src, coords, mask)
