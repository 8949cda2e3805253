"""``glimmer`` command line interface.

Exit codes: 0 success, 1 check failure, 2 usage or data error. Machine
readable output is one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import costs, dataio, gradcheck
from . import kernels as K
from .blocks import Stage, dump_group_features, stage_specs
from .errors import ConfigError, DataError, FormatError, ShapeError
from .layers import use_impl
from .model import (
    GlimmerNetConfig,
    build,
    desk_config,
    paper_config_aiderv2,
    block_variant_config,
    tinyimagenet_config,
)
from .prng import SplitMix64
from .train import OptimHyper, evaluate, train_epochs

PRESETS = {
    "aiderv2": paper_config_aiderv2,
    "desk": desk_config,
    "tinyimagenet": tinyimagenet_config,
    "blocks-4321": lambda: block_variant_config((4, 3, 2, 1)),
    "blocks-4221": lambda: block_variant_config((4, 2, 2, 1)),
    "blocks-1111": lambda: block_variant_config((1, 1, 1, 1)),
}

# preset name -> (batch, width, height) for the per-stage benchmark shapes
BENCH_SHAPES = {
    "stage1": (1, 40, 56), "stage2": (1, 80, 28), "stage3": (1, 160, 14), "stage4": (1, 240, 7),
}


class UsageError(Exception):
    """Bad input from the caller: reported on stderr with exit code 2."""


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def load_config(spec: str | None) -> GlimmerNetConfig:
    if spec is None:
        return paper_config_aiderv2()
    if spec in PRESETS:
        return PRESETS[spec]()
    if not os.path.exists(spec):
        raise UsageError(f"config {spec!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    return GlimmerNetConfig.load(spec)


def _published(cfg: GlimmerNetConfig):
    flagship = paper_config_aiderv2(blocks_per_stage=cfg.blocks_per_stage)
    if cfg.input_hw == (224, 224) and cfg == flagship:
        return costs.PUBLISHED.get(tuple(cfg.blocks_per_stage))
    return None


# ---------------------------------------------------------------- commands

def cmd_summary(args) -> int:
    cfg = load_config(args.config)
    if args.json:
        sys.stdout.write(costs.summary_jsonl(cfg) + "\n")
    else:
        print(costs.summary(cfg))
        ref = _published(cfg)
        if ref is not None:
            total = costs.count_params(cfg).total_params
            flops = costs.count_flops(cfg, "profiler").total_flops
            print(f"published: {ref[0]:,} params ({(total - ref[0]) / ref[0] * 100:+.2f}%), "
                  f"{ref[1] / 1e6:.2f}M FLOPs (profiler convention {flops / 1e6:.2f}M, "
                  f"{(flops - ref[1]) / ref[1] * 100:+.2f}%)")
    if args.counts_out:
        with open(args.counts_out, "w", encoding="utf-8") as fh:
            fh.write(costs.summary_jsonl(cfg) + "\n")
    return 0


def cmd_reconcile(args) -> int:
    sys.stdout.write(costs.reconciliation_report())
    return 0


def cmd_gradcheck(args) -> int:
    scopes = gradcheck.SCOPES if args.scope == "all" else (args.scope,)
    ok = True
    for scope in scopes:
        for rec in gradcheck.run(scope, args.seed):
            _emit(rec.to_dict())
            ok &= rec.passed
    return 0 if ok else 1


def _hyper(args) -> OptimHyper:
    return OptimHyper(lr0=args.lr0)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = dataio.load_dataset(args.data)
    _check_data(cfg, data)
    model = build(cfg, args.seed)
    train_epochs(model, data, _hyper(args), args.epochs, args.batch, args.seed, args.augment, on_epoch=_emit)
    if args.out:
        dataio.save_checkpoint(args.out, model)
    return 0


def _check_data(cfg, data) -> None:
    if data.images.shape[1:] != (3, *cfg.input_hw):
        raise DataError(f"dataset images are {data.images.shape[1:]}, config expects {(3, *cfg.input_hw)}")
    if data.labels.max() >= cfg.num_classes:
        raise DataError(f"dataset has labels up to {data.labels.max()}, config has {cfg.num_classes} classes")


def _load_model(args):
    cfg = load_config(args.config)
    model = build(cfg, args.seed)
    if args.ckpt:
        dataio.load_checkpoint(args.ckpt, model)
    return model


def cmd_eval(args) -> int:
    model = _load_model(args)
    data = dataio.load_dataset(args.data)
    _check_data(model.cfg, data)
    _emit(evaluate(model, data, args.batch).to_dict())
    return 0


def _read_image(path, cfg):
    img = dataio.load_image(path)
    h, w = cfg.input_hw
    if img.shape != (1, 3, h, w):
        raise DataError(f"{path}: image is {img.shape[3]}x{img.shape[2]} (WxH), model expects {w}x{h}")
    return img


def cmd_infer(args) -> int:
    model = _load_model(args)
    img = _read_image(args.image, model.cfg)
    probs = K.softmax(model.forward(img, train=False).astype(np.float64))[0]
    names = model.cfg.class_names or tuple(f"class{i}" for i in range(model.cfg.num_classes))
    best = int(np.argmax(probs))
    _emit({"class": names[best], "index": best, "probs": dict(zip(names, probs.tolist()))})
    return 0


def cmd_dump_features(args) -> int:
    model = _load_model(args)
    n = len(model.stages)
    if not 1 <= args.stage <= n:
        raise UsageError(f"--stage must lie in [1, {n}], got {args.stage}")
    img = _read_image(args.image, model.cfg)
    x = model.stem.forward(img, train=False)
    for stage in model.stages[:args.stage]:
        x = stage.forward(x, train=False)
    feats = model.stages[args.stage - 1].last_block_out
    paths = dump_group_features(feats, model.cfg.m, args.out)
    _emit({"stage": args.stage, "shape": list(feats.shape), "files": paths})
    return 0


def cmd_make_synth(args) -> int:
    if not 1 <= args.classes <= dataio.MAX_CLASSES:
        raise UsageError(f"--classes must lie in [1, {dataio.MAX_CLASSES}], got {args.classes}")
    path = dataio.gen_synth_dataset(args.per_class, args.classes, tuple(args.hw), args.seed, args.out)
    _emit({"manifest": path, "samples": args.classes * args.per_class})
    return 0


# ------------------------------------------------------------------- bench

def _timings(fn, iters):
    times = []
    out = None
    for _ in range(iters):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    t = np.array(times)
    return out, {"median_s": float(np.median(t)), "p10_s": float(np.percentile(t, 10)),
                 "p90_s": float(np.percentile(t, 90))}


def _bench_case(op: str, preset: str, seed: int, dtype):
    """Returns (input shape, fn(impl) -> output)."""
    rng = SplitMix64(seed)
    cfg = paper_config_aiderv2()
    if op == "model":
        model = build(cfg, seed, dtype)
        x = rng.uniform(3 * 224 * 224).reshape(1, 3, 224, 224).astype(dtype)

        def run(impl):
            with use_impl(impl):
                return model.forward(x, train=False)
        return x.shape, run
    n, c, hw = BENCH_SHAPES[preset]
    idx = int(preset[-1]) - 1
    if op == "gddw":
        x = rng.uniform(n * c * hw * hw).reshape(n, c, hw, hw).astype(dtype)
        w = (rng.uniform(c * 9) - 0.5).reshape(c, 1, 3, 3).astype(dtype)
        return x.shape, lambda impl: K.grouped_dilated_dwconv(x, w, cfg.dilations, impl)
    if op == "pwgroup":
        spec = cfg.stages()[idx]
        x = rng.uniform(n * 2 * c * hw * hw).reshape(n, 2 * c, hw, hw).astype(dtype)
        w = (rng.uniform(spec.out_channels * 2 * cfg.m) - 0.5).reshape(
            spec.out_channels, 2 * cfg.m, 1, 1).astype(dtype)
        return x.shape, lambda impl: K.grouped_pointwise_conv(x, w, spec.group_size, impl)
    spec = stage_specs(cfg.stage_widths, cfg.blocks_per_stage, cfg.m, cfg.dilations, cfg.pool_kinds)[idx]
    stage = Stage(rng, spec, dtype=dtype)
    x = rng.uniform(n * c * hw * hw).reshape(n, c, hw, hw).astype(dtype)

    def run(impl):
        with use_impl(impl):
            return stage.forward(x, train=False)
    return x.shape, run


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise UsageError(f"--iters must be >= 1, got {args.iters}")
    if args.op == "model":
        presets = ["model"]
    else:
        presets = list(BENCH_SHAPES) if args.shape == "all" else [args.shape]
        for p in presets:
            if p not in BENCH_SHAPES:
                raise UsageError(f"unknown --shape {p!r}; expected one of {', '.join(BENCH_SHAPES)} or all")
    for preset in presets:
        shape, fn = _bench_case(args.op, preset, args.seed, np.dtype(args.dtype))
        fn("fast")  # warm-up
        ref, naive = _timings(lambda: fn("naive"), args.iters)
        out, fast = _timings(lambda: fn("fast"), args.iters)
        _emit({"op": args.op, "preset": preset, "shape": list(shape), "iters": args.iters,
               "dtype": args.dtype, "threads": K.get_num_threads(), "naive": naive, "fast": fast,
               "speedup": naive["median_s"] / max(fast["median_s"], 1e-12),
               "max_abs_diff": float(np.max(np.abs(ref.astype(np.float64) - out)))})
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42, help="PRNG seed (default 42)")
    common.add_argument("--threads", type=int, default=1, help="kernel worker threads; 1 is bit-reproducible")
    common.add_argument("--config", help=f"model config JSON file or preset: {', '.join(PRESETS)} "
                                         "(default: aiderv2)")

    p = argparse.ArgumentParser(prog="glimmer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("summary", parents=[common], help="per-block parameter/FLOP table")
    s.add_argument("--json", action="store_true", help="print JSON lines instead of the table")
    s.add_argument("--counts-out", help="also write the JSON-lines counts to this file")
    s.set_defaults(fn=cmd_summary)

    s = sub.add_parser("reconcile", parents=[common], help="print the count reconciliation report")
    s.set_defaults(fn=cmd_reconcile)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    s.add_argument("--scope", choices=gradcheck.SCOPES + ("all",), default="kernels")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("train", parents=[common], help="train on a manifest; JSON-lines epoch log")
    s.add_argument("--data", required=True, help="manifest.jsonl")
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--lr0", type=float, default=1e-3)
    s.add_argument("--augment", choices=("none", "hflip"), default="none")
    s.add_argument("--out", help="checkpoint path")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--batch", type=int, default=64)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("infer", parents=[common], help="class probabilities for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True, help="binary PPM (P6) or tensor file of the model's input size")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("bench", parents=[common], help="naive vs optimized kernel timings")
    s.add_argument("--op", choices=("gddw", "pwgroup", "stage", "model"), required=True)
    s.add_argument("--shape", default="stage1", help=f"{', '.join(BENCH_SHAPES)} or all (ignored for model)")
    s.add_argument("--iters", type=int, default=5)
    s.add_argument("--dtype", choices=("float64", "float32"), default="float64",
                   help="float32 paths differ by summation order (~1e-6 at stage scale)")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("dump-features", parents=[common], help="PGM per dilation group of a stage")
    s.add_argument("--ckpt", help="checkpoint (default: seeded initialization)")
    s.add_argument("--image", required=True)
    s.add_argument("--stage", type=int, required=True)
    s.add_argument("--out", default="features", help="output path prefix")
    s.set_defaults(fn=cmd_dump_features)

    s = sub.add_parser("make-synth", parents=[common], help="write the synthetic stripe dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=16)
    s.add_argument("--hw", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_make_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        K.set_num_threads(args.threads)
        return args.fn(args)
    except ConfigError as exc:
        print(f"glimmer: invalid config: {exc}", file=sys.stderr)
    except (UsageError, DataError, FormatError, ShapeError, ValueError, OSError) as exc:
        print(f"glimmer: {exc}", file=sys.stderr)
    return 2


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
