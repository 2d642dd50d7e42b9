"""Forward-only network blocks and a desk-scale DepthNet.

Encoder: conv stem (H/2) followed by four hybrid transformer layers that
each halve the resolution. Decoder: one context prior layer (CPA), three
semantic prior layers (SPA) and a depth layer. Sigmoid heads emit maps at
1/1, 1/2, 1/4 and 1/8 of the input resolution.

Skip pairing: the context layer consumes stage 5 with stage 4 as skip; the
semantic layers take stages 3, 2 and the stem as skips.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import CpaParams, EnergyConfig, cpa, factor_att, simam_energy, simam_refine
from .tensor import (
    ConvParams,
    ShapeError,
    activation,
    as_tensor4,
    batch_norm,
    bilinear_resize,
    conv2d,
    init_conv,
    read_tensor,
    write_tensor,
)

N_PATHS = 3


@dataclass(frozen=True)
class Norm:
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def fresh(cls, c):
        return cls(np.ones(c, dtype=np.float32), np.zeros(c, dtype=np.float32))

    @property
    def n_params(self):
        return self.gamma.size + self.beta.size


def _bn(x, norm):
    return batch_norm(x, norm.gamma, norm.beta)


# -- stem ---------------------------------------------------------------------

@dataclass(frozen=True)
class StemParams:
    conv1: ConvParams  # 3x3, stride 2
    bn1: Norm
    conv2: ConvParams  # 3x3, stride 1
    bn2: Norm

    @classmethod
    def init(cls, rng, in_c, width):
        return cls(init_conv(rng, in_c, width, 3, stride=2), Norm.fresh(width),
                   init_conv(rng, width, width, 3), Norm.fresh(width))


def conv_stem(image, p: StemParams):
    x = as_tensor4(image, "image")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"stem needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
    x = activation(_bn(conv2d(x, p.conv1), p.bn1), "hardswish")
    return activation(_bn(conv2d(x, p.conv2), p.bn2), "hardswish")


# -- hybrid transformer layer -----------------------------------------------

@dataclass(frozen=True)
class EmbedUnit:
    dw: ConvParams  # 3x3 depthwise
    pw: ConvParams  # 1x1 pointwise
    bn: Norm

    @classmethod
    def init(cls, rng, in_c, out_c, stride):
        return cls(init_conv(rng, in_c, in_c, 3, stride=stride, groups=in_c),
                   init_conv(rng, in_c, out_c, 1), Norm.fresh(out_c))


def _embed_unit(x, u: EmbedUnit):
    return activation(_bn(conv2d(conv2d(x, u.dw), u.pw), u.bn), "hardswish")


def ms_patch_embed(x, paths):
    """Path ``k`` stacks ``k`` depthwise/pointwise units (3x3, 5x5, 7x7 receptive fields)."""
    outs = []
    for units in paths:
        y = x
        for u in units:
            y = _embed_unit(y, u)
        outs.append(y)
    return outs


@dataclass(frozen=True)
class HybridLayerConfig:
    in_dim: int
    embed_dim: int
    n_global: int = 3
    paths: int = N_PATHS
    heads: int = 1

    def __post_init__(self):
        if self.n_global not in (2, 3):
            raise ValueError(f"n_global must be 2 or 3, got {self.n_global}")
        if self.paths != N_PATHS:
            raise ValueError(f"exactly {N_PATHS} embedding paths are supported")


@dataclass(frozen=True)
class GlobalBranch:
    q: ConvParams
    k: ConvParams
    v: ConvParams


@dataclass(frozen=True)
class HybridLayerParams:
    paths: list
    globals_: list
    local: list  # 1x1, 3x3 depthwise, 1x1
    interaction: ConvParams

    @classmethod
    def init(cls, rng, cfg: HybridLayerConfig):
        c = cfg.embed_dim
        paths = []
        for k in range(1, cfg.paths + 1):
            units = [EmbedUnit.init(rng, cfg.in_dim, c, 2)]
            units += [EmbedUnit.init(rng, c, c, 1) for _ in range(k - 1)]
            paths.append(units)
        globals_ = [GlobalBranch(*(init_conv(rng, c, c, 1) for _ in range(3))) for _ in range(cfg.n_global)]
        local = [init_conv(rng, c, c, 1), init_conv(rng, c, c, 3, groups=c), init_conv(rng, c, c, 1)]
        interaction = init_conv(rng, (cfg.n_global + 1) * c, c, 1)
        return cls(paths, globals_, local, interaction)


def hybrid_layer_param_count(cfg: HybridLayerConfig):
    """Closed-form parameter count of a hybrid layer."""
    ci, c, g = cfg.in_dim, cfg.embed_dim, cfg.n_global
    first = (9 * ci + ci) + (ci * c + c) + 2 * c
    later = (9 * c + c) + (c * c + c) + 2 * c
    n_units_later = sum(k - 1 for k in range(1, cfg.paths + 1))
    embed = cfg.paths * first + n_units_later * later
    attn = g * 3 * (c * c + c)
    local = 2 * (c * c + c) + (9 * c + c)
    inter = (g + 1) * c * c + c
    return embed + attn + local + inter


def _global_branch(x, br: GlobalBranch, heads):
    n, c, h, w = x.shape

    def tokens(p):
        return conv2d(x, p).reshape(n, c, h * w).transpose(0, 2, 1)

    out = factor_att(tokens(br.q), tokens(br.k), tokens(br.v), heads=heads)
    return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, c, h, w))


def _local_branch(x, convs):
    a, dw, b = convs
    y = activation(conv2d(x, a), "hardswish")
    y = activation(conv2d(y, dw), "hardswish")
    return conv2d(y, b)


def hybrid_layer(x, p: HybridLayerParams, cfg: HybridLayerConfig):
    x = as_tensor4(x, "hybrid input")
    if x.shape[1] != cfg.in_dim:
        raise ShapeError(f"hybrid layer expects {cfg.in_dim} channels, got {x.shape[1]}")
    embeds = ms_patch_embed(x, p.paths)
    # local branch reads the finest path; global branches the last n_global paths
    feats = [_local_branch(embeds[0], p.local)]
    for br, e in zip(p.globals_, embeds[cfg.paths - cfg.n_global:]):
        feats.append(_global_branch(e, br, cfg.heads))
    return conv2d(np.concatenate(feats, axis=1), p.interaction)


# -- decoder layers -----------------------------------------------------------

@dataclass(frozen=True)
class ContextLayerParams:
    conv_in: ConvParams
    cpa: CpaParams
    conv_out: ConvParams


@dataclass(frozen=True)
class SemanticLayerParams:
    conv_in: ConvParams
    bn: Norm
    conv_out: ConvParams
    rho: float = EnergyConfig().rho


def _upsample_concat(x, skip):
    skip = as_tensor4(skip, "skip")
    if skip.shape[2] != 2 * x.shape[2] or skip.shape[3] != 2 * x.shape[3]:
        raise ShapeError(f"skip {skip.shape[2:]} must be twice the spatial size of {x.shape[2:]}")
    up = bilinear_resize(x, skip.shape[2], skip.shape[3])
    return np.concatenate([up, skip], axis=1)


def context_prior_layer(x, skip, p: ContextLayerParams, act="elu"):
    y = activation(conv2d(x, p.conv_in), act)
    y = cpa(_upsample_concat(y, skip), p.cpa)
    return activation(conv2d(y, p.conv_out), act)


def semantic_prior_layer(x, skip, p: SemanticLayerParams, act="elu"):
    y = activation(conv2d(x, p.conv_in), act)
    y = _upsample_concat(y, skip)
    y = simam_refine(y, simam_energy(y, EnergyConfig(p.rho)), p.bn.gamma, p.bn.beta)
    return activation(conv2d(y, p.conv_out), act)


# -- full network -------------------------------------------------------------

@dataclass(frozen=True)
class DepthNetConfig:
    in_channels: int = 3
    stem_width: int = 16
    widths: tuple = (16, 24, 32, 48)
    n_global: tuple = (2, 3, 3, 3)
    reduction: int = 8
    cpa_gain: float = 0.5
    activation: str = "elu"
    heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "n_global", tuple(self.n_global))
        if len(self.widths) != 4 or len(self.n_global) != 4:
            raise ValueError("DepthNet has exactly four hybrid stages")
        if (2 * self.widths[2]) % self.reduction:
            raise ValueError("context layer width (2x stage-4 width) must be divisible by the reduction ratio")

    def stage_configs(self):
        ins = (self.stem_width,) + self.widths[:-1]
        return [HybridLayerConfig(i, o, g, heads=self.heads) for i, o, g in zip(ins, self.widths, self.n_global)]


@dataclass(frozen=True)
class DepthNetParams:
    config: DepthNetConfig
    stem: StemParams
    stages: list
    context: ContextLayerParams
    semantic: list
    depth_in: ConvParams
    depth_out: ConvParams
    heads: list  # sigmoid heads at 1/2, 1/4, 1/8

    @classmethod
    def init(cls, config: DepthNetConfig = DepthNetConfig(), seed=0):
        rng = np.random.default_rng(seed)
        w = config.widths
        stem = StemParams.init(rng, config.in_channels, config.stem_width)
        stages = [HybridLayerParams.init(rng, sc) for sc in config.stage_configs()]
        context = ContextLayerParams(
            init_conv(rng, w[3], w[2], 3),
            CpaParams.init(2 * w[2], rng, reduction=config.reduction, g=config.cpa_gain),
            init_conv(rng, 2 * w[2], w[2], 3),
        )
        skips = [w[1], w[0], config.stem_width]
        semantic, c = [], w[2]
        for s in skips:
            semantic.append(SemanticLayerParams(init_conv(rng, c, s, 3), Norm.fresh(2 * s),
                                                init_conv(rng, 2 * s, s, 3)))
            c = s
        depth_in = init_conv(rng, c, max(c // 2, 1), 3)
        depth_out = init_conv(rng, max(c // 2, 1), 1, 3)
        heads = [init_conv(rng, s, 1, 3) for s in reversed(skips)]
        return cls(config, stem, stages, context, semantic, depth_in, depth_out, heads)


def depthnet_forward(image, params: DepthNetParams):
    """Return sigmoid maps ``[1/1, 1/2, 1/4, 1/8]`` of the input resolution."""
    x = as_tensor4(image, "image")
    if x.shape[2] % 32 or x.shape[3] % 32:
        raise ShapeError(f"input dims must be divisible by 32, got {x.shape[2]}x{x.shape[3]}")
    cfg = params.config
    act = cfg.activation
    feats = [conv_stem(x, params.stem)]
    for p, sc in zip(params.stages, cfg.stage_configs()):
        feats.append(hybrid_layer(feats[-1], p, sc))
    y = context_prior_layer(feats[4], feats[3], params.context, act)
    by_scale = {}
    for p, skip, scale in zip(params.semantic, (feats[2], feats[1], feats[0]), (8, 4, 2)):
        y = semantic_prior_layer(y, skip, p, act)
        by_scale[scale] = y
    outs = {}
    for scale, head in zip((2, 4, 8), params.heads):
        outs[scale] = activation(conv2d(by_scale[scale], head), "sigmoid")
    d = activation(conv2d(y, params.depth_in), act)
    d = bilinear_resize(d, x.shape[2], x.shape[3])
    outs[1] = activation(conv2d(d, params.depth_out), "sigmoid")
    return [outs[1], outs[2], outs[4], outs[8]]


# -- parameter bundles on disk ----------------------------------------------

def flatten_params(obj, prefix=""):
    """Map dotted names to every array (and scalar gain) inside a bundle."""
    out = {}
    if isinstance(obj, np.ndarray):
        out[prefix] = obj
    elif isinstance(obj, (list, tuple)) and not isinstance(obj, str):
        for i, item in enumerate(obj):
            out.update(flatten_params(item, f"{prefix}.{i}" if prefix else str(i)))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            if f.name == "config":
                continue
            if isinstance(val, float) and f.name == "g":
                out[name] = np.asarray(val, dtype=np.float32)
            elif isinstance(val, (np.ndarray, list)) or dataclasses.is_dataclass(val):
                out.update(flatten_params(val, name))
    return out


def count_params(obj):
    return int(sum(a.size for a in flatten_params(obj).values()))


def _rebuild(obj, flat, prefix=""):
    if isinstance(obj, np.ndarray):
        return flat[prefix].astype(np.float32).reshape(obj.shape)
    if isinstance(obj, list):
        return [_rebuild(item, flat, f"{prefix}.{i}" if prefix else str(i)) for i, item in enumerate(obj)]
    if dataclasses.is_dataclass(obj):
        changes = {}
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            if f.name == "config":
                continue
            if isinstance(val, float) and f.name == "g":
                changes[f.name] = float(flat[name].reshape(()))
            elif isinstance(val, (np.ndarray, list)) or dataclasses.is_dataclass(val):
                changes[f.name] = _rebuild(val, flat, name)
        return dataclasses.replace(obj, **changes)
    return obj


def save_params(params: DepthNetParams, directory):
    """Write each array as a PLT1 file plus ``manifest.json`` (name -> file, shape)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in flatten_params(params).items():
        fname = name.replace(".", "_") + ".plt"
        shape = list(arr.shape)
        write_tensor(arr.reshape((1,) * (4 - arr.ndim) + arr.shape), d / fname)
        entries[name] = {"file": fname, "shape": shape}
    manifest = {"config": dataclasses.asdict(params.config), "tensors": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_params(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    config = DepthNetConfig(**manifest["config"])
    skeleton = DepthNetParams.init(config, seed=0)
    flat = {}
    for name, e in manifest["tensors"].items():
        flat[name] = read_tensor(d / e["file"]).reshape(e["shape"])
    missing = set(flatten_params(skeleton)) - set(flat)
    if missing:
        raise ValueError(f"manifest lacks tensors: {sorted(missing)[:5]}")
    return _rebuild(skeleton, flat)
