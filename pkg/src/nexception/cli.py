"""Operator entry point.

Subcommands: ``summarize`` (per-layer cost table), ``train`` (recipe runner
writing CSV/JSON/checkpoint artifacts plus rendered curves), ``search``
(budgeted configuration search writing a JSON-lines history and an incumbent
config consumable by ``train --arch-config``), ``importance`` (local
importance report from a search history), and ``bench`` (CPU throughput
methodology: warmups, timed repetitions, mean and std).

Exit codes: 0 success, 2 usage or configuration error (raised before any
artifact is written), 3 divergence during training. Kernel thread count
defaults to 1 for determinism; raise ``--threads`` to trade that away.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import plots
from . import tensor as T
from .data import load_cifar, synthetic_palette
from .errors import ConfigError, DivergenceError
from .models import VARIANT_NAMES, ArchConfig, build_variant
from .nas import (STRATEGIES, TrialRecord, evaluate_config, lpi_importance,
                  planted_objective, search)
from .summary import count_flops
from .training import TrainConfig, train_model, variant_recipe

# -- config file and flag resolution ----------------------------------------

_TRAIN_HELP = {
    "epochs": "number of training epochs",
    "batch_size": "samples per optimizer step (drop-last batching)",
    "lr": "peak learning rate reached after warmup",
    "min_lr": "learning rate floor at the end of the cosine decay",
    "warmup_epochs": "epochs of linear warmup before the cosine decay "
                     "(shrunk to --epochs when left at the recipe value)",
    "weight_decay": "decoupled weight decay (normalization/bias exempt)",
    "loss": "training objective: bce (one-vs-all sigmoid) or ce (softmax)",
    "label_smoothing": "probability mass moved off the true class",
    "randaug_num_ops": "random augmentation ops applied per image (0 = off)",
    "randaug_magnitude": "mean augmentation magnitude on the 0-10 scale",
    "randaug_std": "per-op gaussian jitter around the magnitude",
    "mixup_alpha": "mixup Beta parameter (0 = off)",
    "cutmix_alpha": "cutmix Beta parameter (0 = off)",
    "erasing_prob": "probability of erasing one random rectangle per image",
    "drop_prob": "final-block stochastic depth rate (linearly ramped)",
    "eval_crop_ratio": "center-crop ratio used by evaluation",
    "seed": "seed for every stochastic stream of the run",
    "divergence_threshold": "epoch mean loss above this aborts with exit 3",
}

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_ARCH_FIELDS = {f.name: f for f in dataclasses.fields(ArchConfig)}


def parse_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and # comments ignored."""
    out = {}
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value', "
                                  f"got '{raw.strip()}'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(name: str, text: str, kind: type):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"config key '{name}' expects {kind.__name__}, "
                          f"got '{text}'") from None


def _field_type(field) -> type:
    return {"int": int, "float": float, "str": str}[field.type]


def resolve_train_config(args) -> tuple[TrainConfig, ArchConfig | None]:
    """Recipe defaults <- config file <- explicit flags, validated before
    any work starts. Arch keys are honored only for the searchable model."""
    file_kv = parse_config_file(args.config) if args.config else {}
    unknown = set(file_kv) - set(_TRAIN_FIELDS) - set(_ARCH_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config file keys: {sorted(unknown)}")

    cfg = variant_recipe(args.model)
    if args.synthetic and "batch_size" not in file_kv \
            and getattr(args, "batch_size") is None:
        # fixture-scale default; the palette split is far below recipe size
        cfg = dataclasses.replace(cfg, batch_size=min(16, args.samples))
    for name, field in _TRAIN_FIELDS.items():
        if name in file_kv:
            cfg = dataclasses.replace(
                cfg, **{name: _coerce(name, file_kv[name], _field_type(field))})
        flag = getattr(args, name, None)
        if flag is not None:
            cfg = dataclasses.replace(cfg, **{name: flag})
    if args.warmup_epochs is None and "warmup_epochs" not in file_kv:
        # short runs shrink the recipe's warmup instead of failing validation
        cfg = dataclasses.replace(
            cfg, warmup_epochs=min(cfg.warmup_epochs, cfg.epochs))
    cfg.validate()

    arch_kv = {k: _coerce(k, v, _field_type(_ARCH_FIELDS[k]))
               for k, v in file_kv.items() if k in _ARCH_FIELDS}
    arch = None
    if args.arch_config:
        with open(args.arch_config) as f:
            arch = ArchConfig.from_dict(json.load(f))
    elif arch_kv:
        arch = ArchConfig.from_dict({**ArchConfig().to_dict(), **arch_kv})
    if arch is not None and args.model != "reduced_nas":
        raise ConfigError("architecture overrides apply only to the "
                          "'reduced_nas' model")
    return cfg, arch


def _load_datasets(args, cfg: TrainConfig):
    if args.synthetic:
        train = synthetic_palette(args.samples, seed=cfg.seed)
        val = synthetic_palette(max(16, args.samples // 4), seed=cfg.seed + 1)
        return train, val
    if not args.data:
        raise ConfigError("pass --data FILE or --synthetic")
    train = load_cifar(args.data, args.dataset)
    val = load_cifar(args.val_data, args.dataset) if args.val_data else None
    return train, val


# -- subcommands --------------------------------------------------------------


def cmd_summarize(args) -> int:
    arch = None
    if args.arch_config:
        with open(args.arch_config) as f:
            arch = ArchConfig.from_dict(json.load(f))
    model = build_variant(args.model, num_classes=args.classes, config=arch)
    hw = (args.input, args.input) if args.input else None
    report = count_flops(model, input_hw=hw)
    print(report.to_json() if args.json else report.render_text())
    return 0


def cmd_train(args) -> int:
    cfg, arch = resolve_train_config(args)
    train_ds, val_ds = _load_datasets(args, cfg)
    model = build_variant(args.model, num_classes=train_ds.num_classes,
                          config=arch, drop_prob=cfg.drop_prob, seed=cfg.seed)
    log = None if args.quiet else lambda line: print(line)
    summary = train_model(model, train_ds, val_ds, cfg, out_dir=args.out,
                          log=log)
    plots.training_curves(summary["history"],
                          os.path.join(args.out, "curves.png"))
    print(f"{model.name}: best val top-1 {summary['best_val_top1']:.4f} "
          f"(epoch {summary['best_epoch']}) in "
          f"{summary['wall_seconds']:.1f}s; artifacts in {args.out}")
    return 0


def _search_objective(args):
    if args.oracle == "planted":
        return planted_objective
    if args.oracle == "planted-single":
        return lambda cfg: 0.50 + (0.30 if cfg.bottleneck == "inverted3"
                                   else 0.0)
    if not args.synthetic:
        raise ConfigError("pass --synthetic to search on trained scores, or "
                          "--oracle for a closed-form objective")
    train = synthetic_palette(args.samples, seed=args.seed)
    val = synthetic_palette(max(16, args.samples // 4), seed=args.seed + 1)
    inner = TrainConfig(epochs=args.epochs, batch_size=min(16, args.samples),
                        lr=2e-3, warmup_epochs=0, loss="ce",
                        randaug_num_ops=0, mixup_alpha=0.0, cutmix_alpha=0.0,
                        erasing_prob=0.0, drop_prob=0.0, seed=args.seed)

    def trained_score(cfg):
        return evaluate_config(cfg, train, val, inner, seed=args.seed)

    return trained_score


def cmd_search(args) -> int:
    if args.trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {args.trials}")
    objective = _search_objective(args)
    os.makedirs(args.out, exist_ok=True)
    history_path = os.path.join(args.out, "history.jsonl")
    out = search(objective, strategy=args.strategy, max_trials=args.trials,
                 wall_budget_s=args.wall_budget, seed=args.seed,
                 init_random=args.init_random, history_path=history_path)
    with open(os.path.join(args.out, "incumbent.json"), "w") as f:
        json.dump(out["incumbent"], f, indent=2)
    report = {k: out[k] for k in ("strategy", "incumbent",
                                  "incumbent_objective", "evaluations",
                                  "wall_seconds", "space_size")}
    report["max_trials"] = args.trials
    report["wall_budget_s"] = args.wall_budget
    report["seed"] = args.seed
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    plots.search_trace(out["trials"], os.path.join(args.out, "trace.png"))
    print(f"{out['evaluations']} trials -> incumbent "
          f"{out['incumbent_objective']:.4f}; artifacts in {args.out}")
    return 0


def _read_history(path: str) -> list[TrialRecord]:
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                records.append(TrialRecord(**json.loads(line)))
    return records


def cmd_importance(args) -> int:
    history = _read_history(args.history)
    if args.trials is not None:
        history = history[:args.trials]
    importance = lpi_importance(history)
    best = max(history, key=lambda t: t.objective)
    report = {
        "importance": importance,
        "incumbent": best.config,
        "incumbent_objective": best.objective,
        "trials_used": len(history),
        "history": args.history,
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "importance.json"), "w") as f:
            json.dump(report, f, indent=2)
        plots.importance_bars(importance,
                              os.path.join(args.out, "importance.png"))
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        width = max(len(k) for k in importance)
        for name, share in sorted(importance.items(), key=lambda kv: -kv[1]):
            bar = "#" * round(40 * share)
            print(f"{name:<{width}}  {share:6.3f}  {bar}")
        print(f"({len(history)} trials; incumbent "
              f"{best.objective:.4f})")
    return 0


def cmd_bench(args) -> int:
    model = build_variant(args.model, num_classes=args.classes,
                          input_hw=(args.input, args.input) if args.input
                          else None)
    model.eval()
    h, w = model.input_hw
    rng = np.random.default_rng([args.seed, 0xBE])
    x = T.Tensor(rng.standard_normal((args.batch, 3, h, w),
                                     dtype=np.float32))
    times = []
    with T.no_grad():
        for _ in range(3):
            model(x)
        for _ in range(args.reps):
            tick = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - tick)
    ips = args.batch / np.asarray(times)
    report = {
        "model": args.model,
        "input_hw": [h, w],
        "batch": args.batch,
        "reps": args.reps,
        "threads": args.threads,
        "ips_mean": float(ips.mean()),
        "ips_std": float(ips.std()),
        "seconds_per_batch_mean": float(np.mean(times)),
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.json"), "w") as f:
            json.dump(report, f, indent=2)
        plots.bench_bars([report], os.path.join(args.out, "bench.png"))
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(f"{args.model} @ {h}x{w}: {report['ips_mean']:.2f} "
              f"+/- {report['ips_std']:.2f} images/s "
              f"(batch {args.batch}, reps {args.reps}, "
              f"threads {args.threads})")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nexception",
        description="Build, train, search, and benchmark the network family.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize",
                       help="per-layer parameter/MAC table for a model")
    p.add_argument("model", help=f"model name, one of {VARIANT_NAMES}")
    p.add_argument("--input", type=int, default=None, metavar="N",
                   help="square input resolution (default: model native)")
    p.add_argument("--classes", type=int, default=1000,
                   help="classifier width (default 1000)")
    p.add_argument("--arch-config", default=None, metavar="FILE",
                   help="JSON architecture overrides for 'reduced_nas'")
    p.add_argument("--json", action="store_true",
                   help="emit the report as JSON instead of a table")
    _common_flags(p)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("train", help="run the training recipe")
    p.add_argument("--model", required=True,
                   help=f"model name, one of {VARIANT_NAMES}")
    p.add_argument("--data", default=None, metavar="FILE",
                   help="binary CIFAR record file for training")
    p.add_argument("--val-data", default=None, metavar="FILE",
                   help="binary CIFAR record file for validation")
    p.add_argument("--dataset", choices=("cifar10", "cifar100"),
                   default="cifar10",
                   help="record layout of --data/--val-data (default cifar10)")
    p.add_argument("--synthetic", action="store_true",
                   help="train on the deterministic palette fixture instead "
                        "of files (batch size capped at the fixture size)")
    p.add_argument("--samples", type=int, default=64,
                   help="fixture training-set size for --synthetic")
    p.add_argument("--out", default=None, metavar="DIR",
                   help="artifact directory (default runs/<model>)")
    p.add_argument("--arch-config", default=None, metavar="FILE",
                   help="JSON architecture file (e.g. a search incumbent); "
                        "only valid with --model reduced_nas")
    p.add_argument("--config", default=None, metavar="FILE",
                   help="flat 'key = value' file with training or "
                        "architecture keys; explicit flags win")
    p.add_argument("--quiet", action="store_true",
                   help="suppress per-epoch progress lines")
    for name, field in _TRAIN_FIELDS.items():
        p.add_argument("--" + name.replace("_", "-"),
                       type=_field_type(field), default=None,
                       help=_TRAIN_HELP[name] +
                       f" (default {getattr(variant_recipe('nexception_t'), name)})")
    _common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search",
                       help="budgeted configuration search over the block "
                            "design space")
    p.add_argument("--strategy", choices=STRATEGIES, default="smbo",
                   help="proposal strategy (default smbo)")
    p.add_argument("--trials", type=int, default=32,
                   help="maximum number of evaluations (default 32)")
    p.add_argument("--wall-budget", type=float, default=None, metavar="S",
                   help="stop after this many seconds, whichever comes first")
    p.add_argument("--init-random", type=int, default=16, metavar="N",
                   help="random trials before model-based proposals")
    p.add_argument("--oracle", choices=("planted", "planted-single"),
                   default=None,
                   help="closed-form objective instead of training "
                        "(planted: two active factors; planted-single: one)")
    p.add_argument("--synthetic", action="store_true",
                   help="score configs by training on the palette fixture")
    p.add_argument("--samples", type=int, default=48,
                   help="fixture training-set size for --synthetic")
    p.add_argument("--epochs", type=int, default=1,
                   help="inner training epochs per trial for --synthetic")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for sampling, proposals, and inner training")
    p.add_argument("--out", default="runs/search", metavar="DIR",
                   help="artifact directory (default runs/search)")
    _common_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("importance",
                       help="local importance shares from a search history")
    p.add_argument("history", help="JSON-lines trial history from 'search'")
    p.add_argument("--trials", type=int, default=None, metavar="N",
                   help="use only the first N trials (default: all); the "
                        "report records the budget actually used")
    p.add_argument("--out", default=None, metavar="DIR",
                   help="also write importance.json and importance.png here")
    p.add_argument("--json", action="store_true",
                   help="print the JSON report instead of the aligned table")
    _common_flags(p)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("bench",
                       help="CPU throughput: warmups then timed repetitions")
    p.add_argument("model", help=f"model name, one of {VARIANT_NAMES}")
    p.add_argument("--input", type=int, default=None, metavar="N",
                   help="square input resolution (default: model native)")
    p.add_argument("--classes", type=int, default=1000,
                   help="classifier width (default 1000)")
    p.add_argument("--batch", type=int, default=8,
                   help="images per forward pass (default 8)")
    p.add_argument("--reps", type=int, default=30,
                   help="timed repetitions after 3 warmups (default 30)")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for the benchmark input tensor")
    p.add_argument("--json", action="store_true",
                   help="emit the report as JSON instead of one line")
    p.add_argument("--out", default=None, metavar="DIR",
                   help="also write bench.json and bench.png here")
    _common_flags(p)
    p.set_defaults(func=cmd_bench)

    return parser


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/kernel thread cap (default 1, deterministic)")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "out", None) is None and args.command == "train":
        args.out = os.path.join("runs", args.model)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
