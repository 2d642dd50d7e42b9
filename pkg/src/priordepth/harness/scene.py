"""Piecewise-planar synthetic scenes rendered by ray casting.

Every view, the target included, is rendered by intersecting pixel rays with
textured planes, so the sources agree with the target under the true depth
and poses up to bilinear-interpolation residue. A zero-motion source is
bit-identical to the target because it goes through the same code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, PoseSE3, pixel_grid

LAYOUTS = ("two-plane", "three-plane", "slanted")

# texture wavelengths, in target pixels at the plane's reference depth
WAVELENGTH_PX = (16.0, 32.0)
N_WAVES = 6
TEXTURE_CONTRAST = 6.0
# the slanted plane shifts by fractional pixels, so a smoother, fainter texture
# keeps the bilinear residue at ground truth small
SLANT_WAVELENGTH_PX = (32.0, 64.0)
SLANT_CONTRAST = 3.0


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray  # unit, target frame
    offset: float  # plane is normal . X = offset
    ref_depth: float
    bounds: tuple | None  # (x0, x1, y0, y1) in plane-local metres, None = unbounded
    base: np.ndarray  # per-channel base intensity
    waves: np.ndarray  # (N_WAVES, 4): kx, ky, phase, amplitude (local metres)

    def basis(self):
        n = self.normal
        e1 = np.array([1.0, 0.0, 0.0]) - n[0] * n
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        origin = n * self.offset
        return origin, e1, e2


@dataclass
class SyntheticScene:
    target: np.ndarray  # (1, c, h, w) float32
    sources: list  # of (1, c, h, w) float32
    gt_depth: np.ndarray  # (h, w) float64
    semantic: np.ndarray  # (h, w) int64
    intrinsics: CameraIntrinsics
    poses: list  # PoseSE3, target frame -> source frame
    planes: list = field(default_factory=list, repr=False)

    @property
    def shape(self):
        return self.gt_depth.shape


# focal length in units of image width; with the default baseline every
# layout depth below shifts by a whole number of pixels
FOCAL_PER_WIDTH = 2.5
BASELINE = 0.25


def default_intrinsics(w, h):
    f = FOCAL_PER_WIDTH * w
    return CameraIntrinsics(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)


def default_poses():
    """Two sideways stereo partners, one on each side of the target."""
    return [
        PoseSE3.from_axis_angle((0.0, 0.0, 0.0), (BASELINE, 0.0, 0.0)),
        PoseSE3.from_axis_angle((0.0, 0.0, 0.0), (-BASELINE, 0.0, 0.0)),
    ]


def _plane(rng, K, normal, offset, ref_depth, bounds_px, channels, base, contrast=TEXTURE_CONTRAST,
           wavelengths=WAVELENGTH_PX):
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    m_per_px = ref_depth / K.fx
    bounds = None
    if bounds_px is not None:
        u0, u1, v0, v1 = bounds_px
        bounds = ((u0 - K.cx) * m_per_px, (u1 - K.cx) * m_per_px,
                  (v0 - K.cy) * m_per_px, (v1 - K.cy) * m_per_px)
    lam = rng.uniform(*wavelengths, size=N_WAVES) * m_per_px
    theta = rng.uniform(0, np.pi, size=N_WAVES)
    waves = np.stack([
        2 * np.pi * np.cos(theta) / lam,
        2 * np.pi * np.sin(theta) / lam,
        rng.uniform(0, 2 * np.pi, size=N_WAVES),
        rng.uniform(0.5, 1.0, size=N_WAVES) * contrast / np.sqrt(N_WAVES),
    ], axis=1)
    base = np.asarray(base, dtype=np.float64)[:channels]
    return Plane(normal, float(offset), float(ref_depth), bounds, base, waves)


def build_planes(layout, K, w, h, rng, channels=3):
    if layout == "two-plane":
        return [
            _plane(rng, K, (0, 0, 1), 10.0, 10.0, None, channels, (0.15, 0.2, 0.25)),
            _plane(rng, K, (0, 0, 1), 4.0, 4.0, (0.3 * w, 0.7 * w, 0.25 * h, 0.75 * h),
                   channels, (0.85, 0.8, 0.75)),
        ]
    if layout == "three-plane":
        return [
            _plane(rng, K, (0, 0, 1), 10.0, 10.0, None, channels, (0.15, 0.2, 0.25)),
            _plane(rng, K, (0, 0, 1), 4.0, 4.0, (0.08 * w, 0.4 * w, 0.3 * h, 0.8 * h),
                   channels, (0.85, 0.8, 0.75)),
            _plane(rng, K, (0, 0, 1), 5.0, 5.0, (0.6 * w, 0.92 * w, 0.2 * h, 0.7 * h),
                   channels, (0.5, 0.7, 0.45)),
        ]
    if layout == "slanted":
        # receding floor-like background: depth grows towards the top of the image
        return [
            _plane(rng, K, (0, 0.25, 1), 9.0, 9.0, None, channels, (0.15, 0.2, 0.25),
                   contrast=SLANT_CONTRAST, wavelengths=SLANT_WAVELENGTH_PX),
            _plane(rng, K, (0, 0, 1), 4.0, 4.0, (0.3 * w, 0.7 * w, 0.25 * h, 0.75 * h),
                   channels, (0.85, 0.8, 0.75)),
        ]
    raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


def render(planes, K: CameraIntrinsics, pose: PoseSE3, h, w):
    """Ray-cast the planes from the camera at ``pose`` (target -> camera).

    Returns ``(image (c, h, w), depth (h, w), label (h, w))`` with depth the
    z-coordinate in that camera's frame.
    """
    u, v = pixel_grid(h, w)
    rays_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)])
    rt = pose.rotation.T
    dirs = np.einsum("ij,jhw->ihw", rt, rays_cam)
    centre = -rt @ pose.translation
    best = np.full((h, w), np.inf)
    label = np.full((h, w), -1, dtype=np.int64)
    image = np.zeros((len(planes[0].base), h, w))
    for idx, pl in enumerate(planes):
        denom = np.einsum("i,ihw->hw", pl.normal, dirs)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (pl.offset - pl.normal @ centre) / denom
        hit = np.isfinite(lam) & (lam > 1e-6) & (lam < best)
        origin, e1, e2 = pl.basis()
        pts = centre[:, None, None] + lam * dirs
        rel = pts - origin[:, None, None]
        a = np.einsum("i,ihw->hw", e1, rel)
        b = np.einsum("i,ihw->hw", e2, rel)
        if pl.bounds is not None:
            x0, x1, y0, y1 = pl.bounds
            hit &= (a >= x0) & (a <= x1) & (b >= y0) & (b <= y1)
        tex = np.zeros((h, w))
        for kx, ky, ph, amp in pl.waves:
            tex += amp * np.sin(kx * a + ky * b + ph)
        best = np.where(hit, lam, best)
        label = np.where(hit, idx, label)
        image = np.where(hit[None], pl.base[:, None, None] + tex[None], image)
    if np.any(label < 0):
        raise RuntimeError("rays missed every plane; background plane must cover the view")
    return image, best, label


def make_synthetic_scene(layout="two-plane", size=(32, 24), texture_seed=0, channels=3, poses=None):
    """Build a scene of ``size = (width, height)`` pixels."""
    w, h = size
    if w < 16 or h < 16:
        raise ValueError(f"scene size must be at least 16x16, got {w}x{h}")
    K = default_intrinsics(w, h)
    rng = np.random.default_rng(texture_seed)
    planes = build_planes(layout, K, w, h, rng, channels)
    poses = default_poses() if poses is None else list(poses)
    target, depth, label = render(planes, K, PoseSE3.identity(), h, w)
    sources = [render(planes, K, p, h, w)[0][None].astype(np.float32) for p in poses]
    return SyntheticScene(
        target=target[None].astype(np.float32),
        sources=sources,
        gt_depth=depth,
        semantic=label,
        intrinsics=K,
        poses=poses,
        planes=planes,
    )
