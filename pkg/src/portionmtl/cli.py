"""Command line entry point: ``portionmtl {gen-data,train,eval,ablation,gradcheck}``."""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from portionmtl import data as data_mod
from portionmtl.config import ConfigError, load_config
from portionmtl.gradcheck import run_suite
from portionmtl.metrics import append_report
from portionmtl.multitask import MODES, CheckpointError, TrainingDiverged, load_checkpoint
from portionmtl.runner import SpecMismatch, evaluate, run_ablation, train_run

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5
EXIT_ABLATION = 6

log = logging.getLogger("portionmtl")


class UsageError(Exception):
    pass


def _global_flags(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="YAML config (else $PORTIONMTL_CONFIG, else defaults)")
    p.add_argument("--seed", type=int, default=default)
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="portionmtl", description=__doc__)
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    sub.add_parser("gen-data", parents=[common], help="generate, split and balance the synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train one mode")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--data", help="dataset directory (overrides data.path)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--data", help="dataset directory (overrides data.path)")
    p.add_argument("--results", help="results log to append to (default: next to the checkpoint)")

    p = sub.add_parser("ablation", parents=[common], help="train and test every mode over the seed set")
    p.add_argument("--modes", nargs="+", choices=MODES)
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--data", help="dataset directory (overrides data.path)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--trials", type=int, default=3)
    return parser


def _load_data(cfg, args):
    path = getattr(args, "data", None) or cfg.data.path
    try:
        return data_mod.load_dataset(path), path
    except data_mod.DatasetError as exc:
        raise data_mod.DatasetError(f"cannot load dataset at {path}: {exc}") from None


def cmd_gen_data(cfg, args):
    out = Path(args.out or cfg.data.path)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    d = cfg.data
    try:
        ds = data_mod.prepare_dataset(d.n_classes, d.per_class, d.image_size, cfg.seed, d.test_fraction,
                                      d.target_per_class, d.augment_first)
    except data_mod.DatasetError as exc:
        raise UsageError(str(exc)) from None
    data_mod.save_dataset(ds, out)
    counts = {s: sum(1 for it in ds.items if it.split == s) for s in ("train", "test")}
    print(f"wrote {len(ds)} images ({counts['train']} train / {counts['test']} test, "
          f"{ds.n_classes} classes) to {out}")
    return EXIT_OK


def cmd_train(cfg, args):
    if args.mode:
        cfg = cfg.with_overrides(mode=args.mode)
    ds, _ = _load_data(cfg, args)
    res = train_run(cfg, ds, args.out or cfg.output_dir)
    last = res.history[-1]
    print(f"{res.run_dir}  final epoch {last.epoch}: overall={last.overall:.4f} "
          f"l_c={last.l_c:.4f} l_r={last.l_r:.4f} l_ps={last.l_ps:.4f}")
    return EXIT_OK


def cmd_eval(cfg, args):
    model = load_checkpoint(args.checkpoint)
    ds, path = _load_data(cfg, args)
    split = ds.subset(args.split)
    if not split.items:
        raise data_mod.DatasetError(f"dataset {path} has no {args.split!r} items")
    rep = evaluate(model, split, cfg.mccr_constant, labels={
        "mode": model.mode, "split": args.split, "checkpoint": str(args.checkpoint)})
    results = Path(args.results) if args.results else Path(args.checkpoint).parent / "reports.jsonl"
    append_report(rep, results)
    print(json.dumps(rep.rounded()))
    return EXIT_OK


def cmd_ablation(cfg, args):
    ds, _ = _load_data(cfg, args)
    out = Path(args.out or cfg.output_dir) / f"ablation_seed{'-'.join(map(str, args.seeds or cfg.ablation_seeds))}_{time.strftime('%Y%m%d-%H%M%S')}"
    table = run_ablation(cfg, ds, out, args.modes, args.seeds, args.workers)
    print(table.render(), end="")
    print(f"written to {out}")
    if table.failed:
        print(f"failed modes: {', '.join(table.failed)}", file=sys.stderr)
        return EXIT_ABLATION
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    results = run_suite(trials=args.trials, seed=cfg.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} components pass (tolerance 1e-4)")
    return EXIT_GRADCHECK if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data_mod.DatasetError, SpecMismatch, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
