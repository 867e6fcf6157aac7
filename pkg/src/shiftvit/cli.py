"""Command-line entry point: train, eval, gradcheck, params, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .bench import analyze, bench_scaling
from .data import DataFormatError, load_cifar
from .gradcheck import check_model, classification_loss
from .model import ModelConfig, build, format_param_report, preset
from .shift_embed import ConfigError
from .training import TrainConfig, evaluate, fit

GRADCHECK_TOL = 1e-3


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _load_run_config(args) -> tuple[ModelConfig, TrainConfig]:
    model_d, train_d = {}, {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        model_d = raw.get("model", {})
        train_d = raw.get("train", {})
    if args.preset:
        model_d = {**model_d, "preset": args.preset}
    if not model_d:
        model_d = {"preset": "cifar-tiny"}
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("batch_size", "batch_size")):
        val = getattr(args, flag, None)
        if val is not None:
            train_d[key] = val
    return ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d)


def cmd_train(args) -> int:
    mcfg, tcfg = _load_run_config(args)
    train = load_cifar(args.data, "train", classes=mcfg.classes)
    test = load_cifar(args.data, "test", classes=mcfg.classes, stats=(train.mean, train.std))
    if args.subset:
        train = train.subset(args.subset)
    model = build(mcfg, seed=tcfg.seed)
    history = fit(model, train, test, tcfg, out_dir=args.out)
    last = history[-1]
    print(f"trained {tcfg.epochs} epochs on {len(train)} images: "
          f"train_loss {last['train_loss']:.4f}, test_acc {last['test_acc']:.4f}")
    ck = checkpoint.load(Path(args.out) / "checkpoint.bin")
    ck.meta["norm_mean"] = train.mean.tolist()
    ck.meta["norm_std"] = train.std.tolist()
    checkpoint.save(Path(args.out) / "checkpoint.bin", ck)
    return 0


def cmd_eval(args) -> int:
    ck = checkpoint.load(args.ckpt)
    model = checkpoint.restore_model(ck)
    stats = None
    if "norm_mean" in ck.meta:
        stats = (np.array(ck.meta["norm_mean"], np.float32), np.array(ck.meta["norm_std"], np.float32))
    test = load_cifar(args.data, "test", classes=model.config.classes, stats=stats)
    acc = evaluate(model, test)
    print(f"test accuracy {acc:.4f} ({len(test)} images)")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = preset(args.preset)
    model = build(cfg, seed=args.seed or 0, dtype=np.float64)
    rng = np.random.default_rng(args.seed or 0)
    images = rng.standard_normal((2, cfg.in_channels) + cfg.image_size)
    labels = rng.integers(0, cfg.classes, size=2)
    results = check_model(model, classification_loss(model, images, labels),
                          max_entries=None if args.full else args.max_entries, seed=args.seed or 0)
    worst = max(results, key=lambda r: r.max_rel_err)
    checked = sum(r.checked for r in results)
    if args.verbose:
        for r in results:
            print(f"{r.name:<48} {str(r.shape):<16} {r.checked:>6}  {r.max_rel_err:.2e}")
    if worst.max_rel_err < GRADCHECK_TOL:
        print(f"PASS, max rel err {worst.max_rel_err:.2e} < {GRADCHECK_TOL:g} "
              f"({checked} entries over {len(results)} tensors)")
        return 0
    print(f"FAIL, max rel err {worst.max_rel_err:.2e} at {worst.name}")
    return 1


def cmd_params(args) -> int:
    cfg = ModelConfig.load(args.config) if args.config else preset(args.preset)
    print(format_param_report(build(cfg)))
    return 0


def cmd_bench(args) -> int:
    result = bench_scaling(args.B, args.T, D=args.dim, heads=args.heads, seed=args.seed or 0)
    text = result.to_csv()
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
    for line in analyze(result).lines():
        print(line, file=sys.stderr if not args.csv else sys.stdout)
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shiftvit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on CIFAR-10 binary batches")
    t.add_argument("--config", help="JSON run config with 'model' and 'train' sections")
    t.add_argument("--preset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--subset", type=int, help="train on the first N training images")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="64-bit finite-difference check of every parameter")
    g.add_argument("--preset", default="toy")
    g.add_argument("--seed", type=int)
    g.add_argument("--max-entries", type=int, default=32, help="entries sampled per tensor")
    g.add_argument("--full", action="store_true", help="check every scalar (slow)")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("params", help="parameter count breakdown")
    c.add_argument("--preset", default="cifar-tiny")
    c.add_argument("--config", help="JSON model config (overrides --preset)")
    c.set_defaults(func=cmd_params)

    b = sub.add_parser("bench", help="attention mul-add scaling sweep")
    b.add_argument("--B", type=_int_list, default=[64, 256, 1024])
    b.add_argument("--T", type=_int_list, default=[2, 4, 9, 18])
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--seed", type=int)
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, checkpoint.CheckpointError, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
