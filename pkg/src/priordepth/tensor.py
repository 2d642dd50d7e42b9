"""Rank-4 float32 tensors (n, c, h, w) and the dense kernels built on them.

Tensors are plain ``numpy.ndarray`` objects with dtype float32. Reductions
accumulate in float64 and round once at the end.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

MAGIC = b"PLT1"
_HEADER = struct.Struct("<4s4I")
# a single PLT1 payload may not exceed 2**31 elements
MAX_ELEMENTS = 2**31


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class TensorFormatError(ValueError):
    """Raised for malformed PLT1 files."""


def as_tensor4(x, name="tensor"):
    a = np.ascontiguousarray(x, dtype=np.float32)
    if a.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {a.shape}")
    return a


@dataclass(frozen=True)
class ConvParams:
    weight: np.ndarray  # (out_c, in_c // groups, kh, kw)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = as_tensor4(self.weight, "conv weight")
        b = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValueError(
                f"invalid conv settings stride={self.stride} padding={self.padding} groups={self.groups}"
            )
        if w.shape[0] % self.groups:
            raise ShapeError(f"out channels {w.shape[0]} not divisible by groups {self.groups}")
        if b.shape[0] != w.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} != out channels {w.shape[0]}")

    @property
    def in_channels(self):
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def n_params(self):
        return self.weight.size + self.bias.size


def uniform_init(rng, shape, fan_in):
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_conv(rng, in_c, out_c, k, stride=1, padding=None, groups=1):
    """Seeded conv parameters; padding defaults to ``k // 2`` (same size at stride 1)."""
    fan_in = in_c // groups * k * k
    return ConvParams(
        weight=uniform_init(rng, (out_c, in_c // groups, k, k), fan_in),
        bias=uniform_init(rng, (out_c,), fan_in),
        stride=stride,
        padding=k // 2 if padding is None else padding,
        groups=groups,
    )


def conv2d(x, p: ConvParams):
    x = as_tensor4(x, "conv input")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"conv input has {c} channels, weights expect {p.in_channels}")
    kh, kw = p.weight.shape[2:]
    if h + 2 * p.padding < kh or w + 2 * p.padding < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {p.padding}"
        )
    # dense convs are a GEMM; BLAS beats the compiled loop there
    impl = kernels.load("python") if p.groups == 1 else kernels.impl
    return impl.conv2d(x, p.weight, p.bias, p.stride, p.padding, p.groups)


def hardswish(v):
    return v * np.clip(v + 3.0, 0.0, 6.0) / 6.0


def sigmoid(v):
    v = np.asarray(v)
    # split by sign so exp never overflows
    out = np.empty_like(v, dtype=np.result_type(v, np.float32))
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def elu(v, alpha=1.0):
    return np.where(v > 0, v, alpha * np.expm1(np.minimum(v, 0.0)))


_ACTIVATIONS = {"hardswish": hardswish, "sigmoid": sigmoid, "elu": elu}


def activation(x, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(np.asarray(x, dtype=np.float64)).astype(np.float32)


def batch_norm(x, gamma, beta, eps=1e-5, running_mean=None, running_var=None):
    """Per-channel normalisation.

    Uses batch statistics over (n, h, w) unless both running statistics are given.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor4(x, "batch_norm input")
    c = x.shape[1]
    gamma = np.asarray(gamma, dtype=np.float64).reshape(1, c, 1, 1)
    beta = np.asarray(beta, dtype=np.float64).reshape(1, c, 1, 1)
    x64 = x.astype(np.float64)
    if running_mean is not None and running_var is not None:
        mu = np.asarray(running_mean, dtype=np.float64).reshape(1, c, 1, 1)
        var = np.asarray(running_var, dtype=np.float64).reshape(1, c, 1, 1)
    else:
        mu = x64.mean(axis=(0, 2, 3), keepdims=True)
        var = ((x64 - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    return ((x64 - mu) / np.sqrt(var + eps) * gamma + beta).astype(np.float32)


def softmax(x, axis=-1):
    x64 = np.asarray(x, dtype=np.float64)
    z = np.exp(x64 - x64.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    # float32 in, float32 out; float64 callers keep full precision
    return out.astype(np.result_type(np.asarray(x).dtype, np.float32))


def global_avg_pool(x):
    x = as_tensor4(x, "pool input")
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("global_avg_pool needs at least one spatial element")
    return x.astype(np.float64).mean(axis=(2, 3))


def _resize_axis(size_in, size_out):
    # align_corners=False source coordinates, clamped at the low edge
    src = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, size_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(x, out_h, out_w):
    x = as_tensor4(x, "resize input")
    if out_h < 1 or out_w < 1:
        raise ShapeError("output size must be at least 1x1")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    a = x.astype(np.float64)
    rows = a[:, :, y0, :] * (1 - fy)[:, None] + a[:, :, y1, :] * fy[:, None]
    out = rows[..., x0] * (1 - fx) + rows[..., x1] * fx
    return out.astype(np.float32)


def write_tensor(t, path):
    a = np.asarray(t)
    if a.ndim != 4:
        raise ShapeError(f"PLT1 stores rank-4 tensors, got shape {a.shape}")
    a = np.ascontiguousarray(a, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *a.shape))
        fh.write(a.tobytes())


def read_tensor(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TensorFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, *dims = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise TensorFormatError(f"{path}: dimension overflow, shape {tuple(dims)} has {count} elements")
    need = _HEADER.size + 4 * count
    if len(data) < need:
        raise TensorFormatError(f"{path}: truncated data, expected {need} bytes, found {len(data)}")
    if len(data) > need:
        raise TensorFormatError(f"{path}: {len(data) - need} trailing bytes after payload")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=_HEADER.size)
    return arr.astype(np.float32).reshape(dims)


def write_pgm(image, path):
    """Write a 2-D array as binary PGM, min-max normalised to 0..255."""
    a = np.asarray(image, dtype=np.float64)
    a = np.squeeze(a)
    if a.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D image, got shape {a.shape}")
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    pix = np.rint(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        fh.write(pix.tobytes())
