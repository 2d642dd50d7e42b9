"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors or failed checks.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

CONFIG_KEYS = ("layout", "size", "steps", "weights.rl", "weights.sl", "weights.sbl", "seed", "eps")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_size(text):
    """``"32x24"`` -> ``(32, 24)`` as (width, height)."""
    try:
        w, h = (int(p) for p in text.lower().replace("×", "x").split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like WIDTHxHEIGHT, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return w, h


def parse_pair(text, kind=float):
    try:
        a, b = (kind(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}") from None
    return a, b


def read_config(path):
    """Flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}; known keys: {', '.join(CONFIG_KEYS)}")
        out[key] = value
    return out


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- gradcheck -----------------------------------------------------------------

def _gradcheck_rows(module, seed):
    from .attention import neuron_energy, neuron_energy_argmin
    from .harness.fd import fd_gradient, richardson_ratio
    from .harness.optimize import DepthObjective, logits_from_depth
    from .harness.scene import make_synthetic_scene
    from .losses import smoothness_loss

    rng = np.random.default_rng(seed)
    rows = []
    if module in ("losses", "all"):
        img = rng.uniform(0, 1, size=(3, 8, 8))
        yy, xx = np.mgrid[0:8, 0:8]
        # neighbour differences stay above eps so no probe crosses a |.| kink
        disp = 0.3 + 0.12 * xx + 0.09 * yy + 0.02 * np.sin(0.7 * xx + 0.4) * np.cos(0.5 * yy)
        r = richardson_ratio(lambda d: smoothness_loss(d, img), disp, 0.05)
        rows.append(("smoothness richardson ratio", r, 3.5, 4.5))

        scene = make_synthetic_scene("two-plane", (16, 16), seed)
        obj = DepthObjective(scene)
        x = logits_from_depth(np.full(scene.shape, 7.0)) + rng.normal(0, 0.3, scene.shape)
        g3 = obj.gradient(x, 1e-3)
        g4 = obj.gradient(x, 1e-4)
        scale = np.maximum(np.abs(g4), 1e-3 * np.abs(g4).max())
        frac = float(np.mean(np.abs(g3 - g4) <= 1e-2 * scale))
        rows.append(("objective eps 1e-3 vs 1e-4 agreement", frac, 0.9, 1.0))

        g_full = fd_gradient(obj.total, x, 1e-3)
        rel = float(np.abs(g3 - g_full).max() / np.abs(g_full).max())
        rows.append(("local vs per-coordinate fd (rel)", rel, 0.0, 1e-8))
    if module in ("attention", "all"):
        worst = 0.0
        for _ in range(20):
            others = rng.normal(size=15)
            t = rng.normal(scale=2.0)
            wb = np.array(neuron_energy_argmin(t, others))
            g = fd_gradient(lambda p: neuron_energy(p[0], p[1], t, others), wb, 1e-4)
            worst = max(worst, float(np.abs(g).max()))
        rows.append(("energy gradient at closed-form minimum", worst, 0.0, 1e-6))

        def min_energy(v):
            w, b = neuron_energy_argmin(v[0], v[1:])
            return neuron_energy(w, b, v[0], v[1:])

        r = richardson_ratio(min_energy, rng.normal(size=9), 0.2)
        rows.append(("minimal energy richardson ratio", r, 3.5, 4.5))
    return rows


def cmd_gradcheck(args):
    rows = _gradcheck_rows(args.module, args.seed)
    lines = [f"{'check':<40} {'value':>12} {'range':>22}  result"]
    ok_all = True
    for name, value, lo, hi in rows:
        ok = lo <= value <= hi
        ok_all &= ok
        lines.append(f"{name:<40} {value:>12.6g} {f'[{lo:g}, {hi:g}]':>22}  {'PASS' if ok else 'FAIL'}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        (_out_dir(args.out) / "gradcheck.txt").write_text(text + "\n")
    return EXIT_OK if ok_all else EXIT_RUNTIME


# -- demo ------------------------------------------------------------------------

def _demo_settings(args):
    cfg = read_config(args.config) if args.config else {}
    try:
        settings = {
            "layout": cfg.get("layout", "two-plane"),
            "size": parse_size(cfg["size"]) if "size" in cfg else (32, 24),
            "steps": int(cfg.get("steps", 200)),
            "w_rl": float(cfg.get("weights.rl", 1.0)),
            "w_sl": float(cfg.get("weights.sl", 1.0)),
            "w_sbl": float(cfg.get("weights.sbl", 0.1)),
            "seed": int(cfg.get("seed", 0)),
            "eps": float(cfg.get("eps", 1e-3)),
        }
    except (ValueError, argparse.ArgumentTypeError) as e:
        raise UsageError(f"bad config value: {e}") from None
    for key in ("layout", "size", "steps", "w_rl", "w_sl", "w_sbl", "seed", "eps"):
        v = getattr(args, key)
        if v is not None:
            settings[key] = v
    return settings


def cmd_demo(args):
    from .harness.optimize import OptimConfig, optimize_depth
    from .harness.scene import make_synthetic_scene
    from .losses import LossWeights
    from .metrics import eval_metrics
    from .tensor import write_pgm, write_tensor

    s = _demo_settings(args)
    out = _out_dir(args.out)
    scene = make_synthetic_scene(s["layout"], s["size"], s["seed"])
    cfg = OptimConfig(steps=s["steps"], fd_epsilon=s["eps"], seed=s["seed"],
                      weights=LossWeights(s["w_rl"], s["w_sl"], s["w_sbl"]))

    def progress(step, b):
        if not args.quiet and (step % 20 == 0 or step == cfg.steps):
            print(f"step {step:4d}  total {b.total:.6f}", file=sys.stderr)

    t0 = time.perf_counter()
    result = optimize_depth(scene, cfg, callback=progress)
    elapsed = time.perf_counter() - t0
    report = eval_metrics(result.depth, scene.gt_depth, median_scale=False)

    (out / "losses.csv").write_text(result.csv())
    (out / "metrics.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    write_tensor(result.depth[None, None].astype(np.float32), out / "depth.plt")
    write_tensor(scene.gt_depth[None, None].astype(np.float32), out / "gt_depth.plt")
    write_pgm(1.0 / result.depth, out / "depth.pgm")
    write_pgm(1.0 / scene.gt_depth, out / "gt_depth.pgm")
    write_pgm(scene.target[0].mean(axis=0), out / "target.pgm")
    (out / "settings.json").write_text(json.dumps({**s, "size": list(s["size"])}, indent=2) + "\n")
    print(report.table())
    print(f"steps {cfg.steps}  accepted {sum(result.accepted)}  time {elapsed:.1f}s", file=sys.stderr)
    return EXIT_OK


# -- eval ------------------------------------------------------------------------

def cmd_eval(args):
    from .metrics import eval_metrics
    from .tensor import read_tensor

    pred = read_tensor(args.pred).astype(np.float64)
    gt = read_tensor(args.gt).astype(np.float64)
    if pred.size != gt.size:
        raise ValueError(f"prediction has {pred.size} values but ground truth has {gt.size}")
    mask = None
    if args.mask:
        mask = read_tensor(args.mask).reshape(gt.shape) > 0
    elif args.valid_only:
        mask = gt > 0
    clamp = None if args.no_clamp else args.clamp
    report = eval_metrics(pred.reshape(gt.shape), gt, mask, median_scale=not args.no_median, clamp=clamp)
    text = report.csv_header() + "\n" + report.csv_row()
    print(text)
    if args.out:
        (_out_dir(args.out) / "metrics.csv").write_text(text + "\n")
    return EXIT_OK


# -- attn-viz --------------------------------------------------------------------

def cmd_attn_viz(args):
    from .attention import CpaParams, cpa_affinity, criss_cross_positions, simam_energy
    from .harness.scene import make_synthetic_scene
    from .tensor import conv2d, init_conv, write_pgm, write_tensor

    w, h = args.size
    scene = make_synthetic_scene(args.layout, (w, h), args.seed)
    rng = np.random.default_rng(args.seed)
    lift = init_conv(rng, scene.target.shape[1], args.channels, 1)
    feat = conv2d(scene.target, lift)
    params = CpaParams.init(args.channels, rng)
    q = conv2d(feat, params.wq)
    k = conv2d(feat, params.wk)
    att = cpa_affinity(q, k)
    y, x = args.pixel if args.pixel else (h // 2, w // 2)
    if not (0 <= y < h and 0 <= x < w):
        raise ValueError(f"pixel {(y, x)} outside the {h}x{w} grid")
    amap = np.zeros((h, w))
    for slot, (py, px) in enumerate(criss_cross_positions(h, w, y, x)):
        amap[py, px] = att[0, slot, y, x]
    energy = simam_energy(feat)[0].astype(np.float64)
    importance = (1.0 / energy).mean(axis=0)

    out = _out_dir(args.out)
    write_pgm(amap, out / "attention.pgm")
    write_pgm(importance, out / "importance.pgm")
    write_pgm(scene.target[0].mean(axis=0), out / "target.pgm")
    write_tensor(att, out / "attention.plt")
    print(f"criss-cross attention at pixel (row {y}, col {x}): {h + w - 1} slots, "
          f"max weight {amap.max():.4f}")
    return EXIT_OK


# -- blocks-shapecheck -----------------------------------------------------------

def cmd_blocks_shapecheck(args):
    from .blocks import DepthNetConfig, DepthNetParams, count_params, depthnet_forward, save_params

    w, h = args.size
    params = DepthNetParams.init(DepthNetConfig(), seed=args.seed)
    image = np.random.default_rng(args.seed).uniform(0, 1, size=(1, 3, h, w)).astype(np.float32)
    t0 = time.perf_counter()
    outs = depthnet_forward(image, params)
    elapsed = time.perf_counter() - t0
    ok = True
    print(f"input (1, 3, {h}, {w})  parameters {count_params(params)}  forward {elapsed:.3f}s")
    for i, o in enumerate(outs):
        want = (1, 1, h >> i, w >> i)
        good = o.shape == want and bool(np.all((o > 0) & (o < 1)))
        ok &= good
        print(f"scale 1/{1 << i}: {tuple(o.shape)}  expected {want}  {'PASS' if good else 'FAIL'}")
    if args.out:
        save_params(params, Path(args.out) / "params")
    return EXIT_OK if ok else EXIT_RUNTIME


# -- entry -----------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="priordepth", description="Depth-prior toolkit: checks, demos and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="finite-difference order and consistency checks")
    g.add_argument("--module", choices=("losses", "attention", "all"), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("demo", help="optimise a depth field on a synthetic scene")
    d.add_argument("--config", help="key=value file; flags override it")
    d.add_argument("--layout", choices=("two-plane", "three-plane", "slanted"))
    d.add_argument("--size", type=parse_size, help="WIDTHxHEIGHT")
    d.add_argument("--steps", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--eps", type=float)
    d.add_argument("--w-rl", dest="w_rl", type=float)
    d.add_argument("--w-sl", dest="w_sl", type=float)
    d.add_argument("--w-sbl", dest="w_sbl", type=float)
    d.add_argument("--out", required=True)
    d.add_argument("--quiet", action="store_true")
    d.set_defaults(func=cmd_demo)

    e = sub.add_parser("eval", help="depth metrics between two tensor files")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--mask")
    e.add_argument("--valid-only", action="store_true", help="evaluate where gt > 0")
    e.add_argument("--clamp", type=parse_pair, default=(0.0, 80.0), help="LO,HI")
    e.add_argument("--no-clamp", action="store_true")
    e.add_argument("--no-median", action="store_true", help="skip median scaling")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attn-viz", help="render a criss-cross attention map and neuron importance")
    a.add_argument("--layout", choices=("two-plane", "three-plane", "slanted"), default="two-plane")
    a.add_argument("--size", type=parse_size, default=(32, 24))
    a.add_argument("--pixel", type=lambda t: parse_pair(t, int), help="ROW,COL")
    a.add_argument("--channels", type=int, default=16)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attn_viz)

    b = sub.add_parser("blocks-shapecheck", help="run the depth network and check output shapes")
    b.add_argument("--size", type=parse_size, default=(64, 32))
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="also save the parameter bundle here")
    b.set_defaults(func=cmd_blocks_shapecheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except (ValueError, OSError, ArithmeticError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
