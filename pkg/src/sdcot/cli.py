"""Command-line entry point: ``sdcot gen-data | train | eval | suite``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .cotraining import MODES
from .data import ConfigurationError
from .runs import ArgumentError, cmd_gen_data, load_dataset, run_eval, run_train

log = logging.getLogger("sdcot")


def _resolve_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ArgumentError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return cfg.with_overrides(overrides)


def _classes(text):
    return [c for c in text.split(",") if c] if text is not None else None


def _gen_data(args):
    cfg = _resolve_config(args)
    over = {}
    if args.n_train is not None:
        over["n_train"] = args.n_train
    if args.n_val is not None:
        over["n_val"] = args.n_val
    cfg = cfg.with_overrides(over)
    info = cmd_gen_data(cfg, args.out)
    print(f"wrote {info['n_train']} train + {info['n_val']} val scenes to {info['dir']}")


def _train(args):
    cfg = _resolve_config(args)
    train, val = load_dataset(args.data, cfg)
    inputs = [Path(args.data) / "splits.txt"]
    info = run_train(cfg, train, val, args.mode, args.out, base_ckpt=args.base, round_index=args.round,
                     replay_ratio=args.replay_ratio, epochs=args.epochs, inputs=inputs)
    print(f"{args.mode}: checkpoint {info['checkpoint']} ({info['seconds']:.1f} s)")


def _eval(args):
    cfg = _resolve_config(args)
    _, val = load_dataset(args.data, cfg)
    report, _ = run_eval(cfg, val, args.checkpoint, args.out, base_classes=_classes(args.base_classes),
                         novel_classes=_classes(args.novel_classes))
    print(report.table())


def _suite(args):
    from .suite import format_table, run_suite

    cfg = _resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ArgumentError("--seeds needs at least one seed")
    result = run_suite(cfg, seeds, args.out, workers=args.workers, epochs=args.epochs,
                       base_epochs=args.base_epochs)
    print(format_table(result))
    print(f"suite finished in {result.wall_seconds:.0f} s; outputs in {result.out_dir}")


def build_parser():
    p = argparse.ArgumentParser(prog="sdcot", description="Class-incremental 3D detection with static-dynamic co-teaching.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    g = sub.add_parser("gen-data", help="generate synthetic scenes and the split index")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train a base, joint or incremental model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", required=True, choices=MODES)
    t.add_argument("--base", help="checkpoint to start from (incremental modes)")
    t.add_argument("--round", type=int, default=0, help="0: all novel classes at once; r: sequential round r")
    t.add_argument("--replay-ratio", type=float)
    t.add_argument("--epochs", type=int, help="override the configured epoch count")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the validation scenes")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True, help="report CSV path (a .txt table is written next to it)")
    e.add_argument("--base-classes")
    e.add_argument("--novel-classes")
    e.set_defaults(func=_eval)

    s = sub.add_parser("suite", help="run the full comparison over several seeds")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--epochs", type=int, help="incremental epochs override (smoke runs)")
    s.add_argument("--base-epochs", type=int, help="base/joint epochs override (smoke runs)")
    s.set_defaults(func=_suite)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ArgumentError, ConfigurationError, ValueError) as exc:
        print(f"sdcot {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"sdcot {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
