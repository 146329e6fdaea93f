"""Command-line driver: train, probe, ablate, bench, gradcheck, inspect.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ASCError

log = logging.getLogger("asc")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["train.seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["out"] = str(args.out)
    return cfg.replace(**updates) if updates else cfg


def _header_line(cfg: RunConfig) -> str:
    return "# config: " + json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def cmd_train(args) -> int:
    from .trainer import run_training, running_mean

    cfg = _resolve(args)
    res = run_training(cfg, cfg.out, progress=args.verbose)
    print(f"checkpoint: {res.checkpoint_path}")
    print(f"metrics:    {res.metrics_path}")
    if res.losses:
        rm = running_mean(res.losses)
        print(f"steps {len(res.losses)}  final loss {res.losses[-1]:.4f}  running mean {rm[-1]:.4f}  "
              f"{res.seconds_per_step:.3f} s/step")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .checkpoint import atomic_write
    from .evaluation import probe_state
    from .trainer import load_state

    cfg = _resolve(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint.asc"
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    _, state = load_state(ckpt)
    res = probe_state(state, cfg, shuffle_labels=args.shuffle_labels)
    report = {"checkpoint": str(ckpt), "shuffled_labels": args.shuffle_labels, "top1": res.top1,
              "train_top1": res.train_top1, "per_class": {str(k): v for k, v in res.per_class.items()},
              "n": res.n, "config": cfg.to_dict()}
    out = Path(cfg.out) / ("probe_shuffled.json" if args.shuffle_labels else "probe.json")
    atomic_write(out, (json.dumps(report, sort_keys=True, indent=2) + "\n").encode())
    print(f"top1 {res.top1:.4f} on {res.n} held-out clips  (train {res.train_top1:.4f})")
    for k, v in sorted(res.per_class.items()):
        print(f"  class {cfg.data.classes[k]:<9} {v:.4f}")
    print(f"report: {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .checkpoint import atomic_write
    from .evaluation import VARIANTS, ablation_csv, run_ablation

    cfg = _resolve(args)
    variants = args.variants or list(VARIANTS)
    rows = run_ablation(cfg, variants, args.seeds, Path(cfg.out) / "ablation", parallel=args.parallel)
    out = Path(cfg.out) / "ablation.csv"
    atomic_write(out, (_header_line(cfg) + ablation_csv(rows)).encode())
    for r in rows:
        print(f"{r.variant:<16} seed {r.seed}  top1 {r.top1:.4f}  tokens_ratio {r.tokens_ratio:.3f}  "
              f"{r.sec_per_step:.3f} s/step")
    print(f"report: {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .checkpoint import atomic_write
    from .data import generate_clip
    from .evaluation import BENCH_HEADER, bench_tokens, layer_diagnostics, rows_csv
    from .ssl import init_state
    from .trainer import load_state

    cfg = _resolve(args) if args.config else RunConfig()
    if args.out is not None and not args.config:
        cfg = cfg.replace(out=str(args.out))
    thetas = args.thetas if args.thetas else None
    rows = bench_tokens(thetas, tuple(args.sizes), d=args.dim, seed=args.seed or 0)
    out = Path(cfg.out)
    atomic_write(out / "bench.csv", (_header_line(cfg) + rows_csv(rows, BENCH_HEADER)).encode())

    if args.checkpoint:
        _, state = load_state(args.checkpoint)
    else:
        state = init_state(cfg.encoder, np.random.default_rng(cfg.train.seed))
    images = np.stack([generate_clip(i, cfg.data.clip_length, cfg.data.image_size).frames[0]
                       for i in range(args.images)])
    lines = layer_diagnostics(state.online, cfg, images)
    atomic_write(out / "diagnostics.jsonl", "".join(line + "\n" for line in lines).encode())
    mono = all(r["monotone"] for r in rows)
    print(f"{len(rows)} rows, component count monotone in theta: {mono}")
    print(f"report: {out / 'bench.csv'}")
    print(f"diagnostics: {out / 'diagnostics.jsonl'}")
    return EXIT_OK if mono else EXIT_RUNTIME


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite, tolerance

    ok = True
    for name, err in run_suite(args.seed or 0).items():
        tol = tolerance(name)
        good = err <= tol
        ok &= good
        print(f"{name:<34} {err:.3e}  (tol {tol:g})  {'ok' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_inspect(args) -> int:
    from .checkpoint import load

    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    config, params = load(path)
    print("config:")
    print(json.dumps(config, sort_keys=True, indent=2))
    print("parameters:")
    for name in sorted(params):
        print(f"  {name:<40} {tuple(params[name].shape)}")
    print("theta:")
    for name in sorted(params):
        if name.endswith(".theta"):
            print(f"  {name:<40} {float(params[name]):.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asc", description="Adaptive superpixel coding: training and evaluation tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON run config")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--out", help="override the output directory")

    sp = sub.add_parser("train", help="self-supervised training run")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("probe", help="linear probe on frozen features")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint to probe (default: OUT/checkpoint.asc)")
    sp.add_argument("--shuffle-labels", action="store_true", help="chance-level control")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("ablate", help="train and probe every ablation variant")
    common(sp)
    sp.add_argument("--variants", nargs="+", help="subset of variants (default: all)")
    sp.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    sp.add_argument("--parallel", action="store_true", help="run variants in processes (ASC_THREADS caps)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="token-count and cost sweep")
    common(sp, config_required=False)
    sp.add_argument("--thetas", nargs="+", type=float)
    sp.add_argument("--sizes", nargs="+", type=int, default=[16, 32, 64, 128])
    sp.add_argument("--dim", type=int, default=16)
    sp.add_argument("--checkpoint", help="model for the per-layer diagnostics dump")
    sp.add_argument("--images", type=int, default=8)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op and the model")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("inspect", help="print a checkpoint's config, shapes and thresholds")
    sp.add_argument("checkpoint")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ASCError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - contractual exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
