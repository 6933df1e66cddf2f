"""Command-line entry point: ``blendcore <command> [options]``.

Exit codes: 0 success, 1 failed grad check, 2 bad input (config, axis,
checkpoint), 3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import bench as B
from . import gradcheck as G
from . import synthdata as SD
from .blender import ConfigError
from .experiment import (
    AXES,
    ExperimentConfig,
    generate_dataset,
    load_config,
    parse_dataset,
    run_ablation,
    run_experiment,
    write_run_json,
)
from .trainer import DivergenceError, load_checkpoint

log = logging.getLogger("blendcore")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def resolve_threads(flag: int | None) -> int:
    env = os.environ.get("BLENDCORE_THREADS")
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"BLENDCORE_THREADS must be an integer, got {env!r}") from None
    else:
        value = 1 if flag is None else flag
    if value < 1:
        raise UsageError(f"thread count must be >= 1, got {value}")
    return value


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, dataset=replace(cfg.dataset, seed=args.seed), train=replace(cfg.train, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


# --------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    cfg = _config(args)
    result = run_experiment(cfg, resolve_threads(args.threads))
    r = result.report
    print(
        f"{r.label}: mean_iou={r.mean_iou:.4f} frac50={r.frac50:.4f} frac75={r.frac75:.4f} "
        f"n={r.n_instances} final_loss={result.curve[-1][1]:.4f} out={cfg.out}"
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.axis not in AXES:
        raise ConfigError(f"axis: expected one of {', '.join(AXES)}, got {args.axis!r}")
    cfg = _config(args)
    rows = run_ablation(cfg, args.axis, resolve_threads(args.threads), cfg.out)
    for label, ious, dis in rows:
        mean = sum(ious) / len(ious) if ious else 0.0
        print(f"{label}: mean_iou={mean:.4f} overlap_disagreement={dis:.4f}")
    print(f"wrote {Path(cfg.out) / f'ablation_{args.axis}.csv'}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .visualize import render

    ckpt = Path(args.checkpoint)
    try:
        params = load_checkpoint(ckpt)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    ds_file = ckpt / "dataset.json"
    spec = parse_dataset(json.loads(ds_file.read_text())) if ds_file.exists() else SD.DatasetSpec()
    n = spec.n_train if args.split == "train" else spec.n_val
    if not 0 <= args.scene < n:
        raise UsageError(f"scene {args.scene} out of range for the {args.split} split of {n} scenes")
    scene = SD.make_scene(spec, args.split, args.scene, args.scene in SD.overlap_indices(spec, args.split, n))
    out = _out(args, "runs/visualize")
    with threadpool_limits(1):
        files = render(params, scene, out)
    write_run_json(out, "visualize", None, {"checkpoint": str(ckpt), "scene": args.scene, "split": args.split})
    print(f"wrote {len(files)} images to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    with threadpool_limits(1):
        reports = G.run_all(seed=args.seed or 0)
    lines = ["op,max_rel_err,tol,pass"] + [r.csv_row() for r in reports]
    print("\n".join(lines))
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
        write_run_json(out, "gradcheck", None)
    failed = [r.op for r in reports if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args) if args.config else None
    blend_cfg = cfg.blend if cfg else ExperimentConfig().blend
    out = _out(args, cfg.out if cfg else "runs/bench")
    out.mkdir(parents=True, exist_ok=True)
    threads = resolve_threads(args.threads)
    if args.repeats < 20 or args.warmup < 3:
        raise UsageError("bench needs --repeats >= 20 and --warmup >= 3")
    with threadpool_limits(1):
        results = [B.bench_blend(blend_cfg, args.D, args.repeats, args.warmup)]
        if threads > 1:
            results.append(B.bench_blend(blend_cfg, args.D, args.repeats, args.warmup, threads))
        results.append(B.bench_roi_head_baseline(blend_cfg, args.head_D, args.repeats, args.warmup))
    B.write_csv(out / "bench.csv", results)
    if args.svg:
        B.write_svg(out / "bench.svg", results)
    blend, head = results[0], results[-1]
    summary = {
        "blend_marginal_us": blend.marginal_us,
        "head_marginal_us": head.marginal_us,
        "marginal_ratio": head.marginal_us / blend.marginal_us,
        "blend_exponent": blend.exponent,
        "flop_ratio": B.head_flops(blend_cfg.R, blend_cfg.K) / B.blend_flops(blend_cfg.R, blend_cfg.K),
    }
    write_run_json(out, "bench", cfg, {"bench": summary, "bench_config": blend_cfg.label})
    for r in results:
        print(f"{r.kernel}: exponent={r.exponent:.3f} marginal_us={r.marginal_us:.1f}")
    print(f"head/blend marginal ratio={summary['marginal_ratio']:.1f} flop ratio={summary['flop_ratio']:.1f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    with threadpool_limits(1):
        train_set, val_set = generate_dataset(cfg.dataset, resolve_threads(args.threads))
    SD.export(train_set, out / "train")
    SD.export(val_set, out / "val")
    write_run_json(out, "gen-data", cfg)
    print(f"wrote {len(train_set)} train and {len(val_set)} val scenes to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("instance counts must be positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    def add_globals(p, default):
        p.add_argument("--seed", type=int, default=default, help="override the dataset and training seeds")
        p.add_argument("--out", default=default, help="output directory")
        p.add_argument("--threads", type=int, default=default, help="worker count (BLENDCORE_THREADS wins)")

    parser = argparse.ArgumentParser(prog="blendcore", description="Blended instance-mask experiments.")
    add_globals(parser, None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        add_globals(p, argparse.SUPPRESS)
        p.set_defaults(fn=fn)
        return p

    p = command("run", cmd_run, "generate data, train, evaluate")
    p.add_argument("config", nargs="?", help="experiment JSON (defaults if omitted)")

    p = command("ablate", cmd_ablate, "train every cell along one ablation axis")
    p.add_argument("config", nargs="?")
    p.add_argument("--axis", required=True, help=f"one of {', '.join(AXES)}")

    p = command("visualize", cmd_visualize, "render bases, attentions and masks for one scene")
    p.add_argument("checkpoint")
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--split", choices=("train", "val"), default="val")

    command("gradcheck", cmd_gradcheck, "finite-difference check every differentiable op")

    p = command("bench", cmd_bench, "time the blend stage against a per-RoI conv head")
    p.add_argument("config", nargs="?")
    p.add_argument("--D", type=_int_list, default=[1, 2, 4, 8, 16, 32, 64, 128])
    p.add_argument("--head-D", type=_int_list, default=[1, 2, 4, 8, 16])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--svg", action="store_true", help="also write bench.svg")

    p = command("gen-data", cmd_gen_data, "write the synthetic dataset to disk")
    p.add_argument("config", nargs="?")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
