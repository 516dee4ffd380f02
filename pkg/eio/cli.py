#!/usr/bin/env python3
"""
Command-line driver::

    python -m eio build --config configs/desk_recipe.cfg
    python -m eio train --config configs/desk_recipe.cfg --resume
    python -m eio eval --config configs/desk_recipe.cfg runs/desk/derived/*.npz
"""

import sys
import logging
import argparse
from pathlib import Path

from eio import analysis
from eio import experiment
from eio.analysis import sweeps
from eio.archspec import ParseError
from eio.attacks import ProtocolError
from eio.checkpoint import CheckpointError, read_manifest
from eio.config import ConfigError, load_config
from eio.data import DatasetError
from eio.rgn import InfeasiblePathError


logger = logging.getLogger(__name__)

ERROR_CATEGORIES = (
        (ConfigError, "config", 2),
        (ParseError, "parse", 3),
        (CheckpointError, "checkpoint", 4),
        (DatasetError, "dataset", 5),
        (InfeasiblePathError, "infeasible", 6),
        (ProtocolError, "protocol", 7),
        (FileNotFoundError, "config", 2),
)


def error_category(err):
    for kind, category, code in ERROR_CATEGORIES:
        if isinstance(err, kind):
            return category, code
    return "other", 1


def config_from_args(args):
    overrides = list(args.set or [])
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.n is not None:
        overrides.append(f"n={args.n}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output is not None:
        overrides.append(f"output_dir={args.output}")
    return load_config(args.config, overrides)


def cmd_build(args):
    manifest = experiment.run_build(config_from_args(args))
    analysis.summarize_manifest(manifest)


def cmd_train(args):
    _, state = experiment.run_train(config_from_args(args), resume=args.resume)
    print(f"-- Phase:    {state.phase}")
    print(f"-- Updates:  {state.updates: 8d}")


def cmd_derive(args):
    cfg = config_from_args(args)
    written = experiment.run_derive(cfg, count=args.count,
            do_finetune=args.finetune, checkpoint=args.checkpoint)
    for path in written:
        print(path)


def cmd_finetune(args):
    for path in experiment.run_finetune(config_from_args(args), args.models):
        print(path)


def cmd_eval(args):
    cfg = config_from_args(args)
    if args.rule is not None:
        cfg.eval.ensemble_rule = args.rule
    experiment.run_eval(cfg, args.models, protocols=args.protocol,
            surrogate_paths=args.surrogates, ensemble=args.ensemble, eps_grid=args.eps)


def cmd_surrogates(args):
    cfg = config_from_args(args)
    if args.nproc is not None:
        cfg.surrogates.nproc = args.nproc
    for path in experiment.run_surrogates(cfg, count=args.count, baseline=args.baseline):
        print(path)


def cmd_report(args):
    cfg = config_from_args(args)
    report_dir = args.dir or experiment.RunDirectory(cfg.output_path).reports
    experiment.run_report(report_dir)


def cmd_inspect(args):
    analysis.summarize_manifest(read_manifest(args.checkpoint))


def cmd_sweep(args):
    cfg = config_from_args(args)
    grid = sweeps.GridParser.parse(args.grid)
    df = sweeps.run_sweep(cfg, grid, experiment.run_pipeline)
    if not df.empty:
        out = experiment.RunDirectory(cfg.output_path).root / "sweep.csv"
        df.to_csv(out, index=False)
        sweeps.summarize_sweep(df)


def cmd_stability(args):
    experiment.run_stability(config_from_args(args), count=args.count,
            checkpoint=args.checkpoint)


def cmd_pipeline(args):
    experiment.run_pipeline(config_from_args(args), resume=args.resume)


def cmd_profile(args):
    from eio.profiling import profile_diversify_step
    profile_diversify_step(config_from_args(args))


def add_config_args(parser):
    parser.add_argument("--config", type=Path, help="Experiment config file (.cfg)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
            help="Override a config value; repeatable")
    parser.add_argument("--epochs", type=int, help="Sets train.epochs")
    parser.add_argument("--n", type=int, help="Augmentation factor")
    parser.add_argument("--seed", type=int, help="Global seed")
    parser.add_argument("--output", help="Output directory, relative to the output root")


def make_parser():
    parser = argparse.ArgumentParser(prog="eio",
            description="Random gated networks trained for vulnerability diversification")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="Initialize an RGN checkpoint")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="Pretrain and diversify")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("derive", help="Derive standalone models from paths")
    p.add_argument("--count", type=int)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--finetune", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("finetune", help="Fine-tune standalone models")
    p.add_argument("models", nargs="+", type=Path)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="Black-box, white-box and transfer evaluation")
    p.add_argument("models", nargs="+", type=Path)
    p.add_argument("--protocol", action="append",
            choices=("blackbox", "whitebox", "transfer"))
    p.add_argument("--surrogates", nargs="+", type=Path)
    p.add_argument("--ensemble", action="store_true",
            help="Evaluate the models as one ensemble")
    p.add_argument("--rule", choices=("mean-prob", "mean-logit", "majority-vote"))
    p.add_argument("--eps", nargs="+", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("surrogates", help="Standard-train surrogate models")
    p.add_argument("--count", type=int)
    p.add_argument("--nproc", type=int)
    p.add_argument("--baseline", action="store_true",
            help="Also train a standard baseline of the target architecture")
    p.set_defaults(func=cmd_surrogates)

    p = sub.add_parser("report", help="Tabulate report CSVs")
    p.add_argument("dir", nargs="?", type=Path)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="Print a checkpoint manifest")
    p.add_argument("checkpoint", type=Path)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep", help="Run the pipeline over a parameter grid")
    p.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stability", help="Accuracy spread over derived paths")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--checkpoint", type=Path)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("pipeline", help="build, surrogates, train, derive, eval")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("profile", help="Profile one diversification step")
    p.set_defaults(func=cmd_profile)

    for p in sub.choices.values():
        add_config_args(p)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        args.func(args)
    except Exception as err:
        category, code = error_category(err)
        if code == 1:
            logger.exception("Unexpected error")
        print(f"error[{category}]: {err}", file=sys.stderr)
        return code
    return 0
