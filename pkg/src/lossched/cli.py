"""Command-line front end: synth, train-controller, guide, baseline,
transfer, report."""

from __future__ import annotations

import argparse
import sys

from . import harness


def _add_common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", required=config_required, help="config file path")
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--trials", type=int, default=None, help="override run.trials")


def _load(args) -> dict:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg["run.seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        cfg["run.trials"] = args.trials
    if getattr(args, "ablate", None):
        cfg["features.ablate"] = args.ablate
        harness.validate_config(cfg)
    return cfg


def _parse_sweep(text: str) -> tuple:
    lo, hi, n = text.split(":")
    lo, hi, n = float(lo), float(hi), int(n)
    if n == 1:
        return (lo,)
    import numpy as np
    return tuple(np.logspace(np.log10(lo), np.log10(hi), n))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lossched",
                                     description="Learned optimization-schedule experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize datasets and 5-way splits")
    _add_common(p)

    p = sub.add_parser("train-controller", help="train a scheduling controller")
    _add_common(p)
    p.add_argument("--data", default=None, help="directory produced by synth")
    p.add_argument("--budget", type=int, default=None,
                   help="max scanned training batches")
    p.add_argument("--ablate", default=None,
                   help="drop one feature block (progress|grad_norms|loss_values|validation)")

    p = sub.add_parser("guide", help="guide fresh task models with a trained controller")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file or train-controller dir")
    p.add_argument("--data", required=True, help="directory produced by synth")
    p.add_argument("--lambda-sweep", default=None, metavar="LO:HI:N",
                   help="repeat guidance across an L1-scale grid")
    p.add_argument("--sweep-mode", choices=("retrain", "fixed"), default="retrain")
    p.add_argument("--ablate", default=None)

    p = sub.add_parser("baseline", help="run a non-learned schedule")
    _add_common(p)
    p.add_argument("--baseline", required=True,
                   help="wol1|uniform|s1|s2|s3|dgs | gan ratios like 1:5 or 'grid' | "
                        "fixedratio|finetuned|mtonly")
    p.add_argument("--data", default=None, help="directory produced by synth")

    p = sub.add_parser("transfer", help="apply a trained controller to new data or models")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("data", "model", "both"), required=True)

    p = sub.add_parser("report", help="aggregate metrics CSVs into summary tables")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None, help="summary CSV path")

    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            out = harness.cmd_synth(_load(args), args.out, force=args.force)
        elif args.command == "train-controller":
            out = harness.cmd_train_controller(_load(args), args.out,
                                               data_dir=args.data, force=args.force,
                                               budget=args.budget)
        elif args.command == "guide":
            sweep = _parse_sweep(args.lambda_sweep) if args.lambda_sweep else None
            out = harness.cmd_guide(_load(args), args.out, ckpt=args.ckpt,
                                    data_dir=args.data, force=args.force,
                                    lambda_sweep=sweep, sweep_mode=args.sweep_mode)
        elif args.command == "baseline":
            out = harness.cmd_baseline(_load(args), args.out, name=args.baseline,
                                       data_dir=args.data, force=args.force)
        elif args.command == "transfer":
            out = harness.cmd_transfer(_load(args), args.out, ckpt=args.ckpt,
                                       mode=args.mode, force=args.force)
        elif args.command == "report":
            summary = harness.cmd_report(args.run_dir, args.out)
            for row in summary:
                print(f"{row['method']:<14} {row['variant']:<16} n={row['n']:<3} "
                      f"test_adj={row['test_adjusted_mean']:.4f} "
                      f"(+-{row['test_adjusted_std']:.4f})")
            return 0
        else:  # pragma: no cover
            parser.error(f"unknown command {args.command}")
    except (ValueError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
