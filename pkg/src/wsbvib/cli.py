"""Command-line entry point.

Subcommands mirror the library pipeline: generate a synthetic cohort,
train a model, evaluate a checkpoint, and render the comparison report.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .config import SEED_ENV_VAR, load_cohort_config, load_run_config
from .errors import WsbvibError
from .evaluation import evaluate
from .report import report
from .synth import generate_cohort
from .training import train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsbvib")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="synthesize a labelled cohort")
    gen.add_argument("--config", required=True, help="cohort config file")

    tr = sub.add_parser("train", help="train a model from a run config")
    tr.add_argument("--config", required=True, help="run config file")
    tr.add_argument("--resume", default=None, help="checkpoint to resume from")
    tr.add_argument("--desk-scale", action="store_true",
                    help="cap training at 20 epochs for quick turnaround")

    ev = sub.add_parser("evaluate", help="evaluate a trained checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out-dir", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--max-modes", type=int, default=8)
    ev.add_argument("--specificity-samples", type=int, default=100)
    ev.add_argument("--specificity-clouds", type=int, default=50)
    ev.add_argument("--cloud-subsample", type=int, default=256)

    rep = sub.add_parser("report", help="render figures and summary tables")
    rep.add_argument("--runs", nargs="+", required=True,
                     help="evaluation output directories to compare")
    rep.add_argument("--out", required=True, help="report output directory")
    return parser


def _cmd_generate(args) -> int:
    cfg = load_cohort_config(args.config)
    samples = generate_cohort(cfg)
    manifest = os.path.join(os.path.abspath(cfg.out_dir), "manifest.txt")
    print(f"cohort written: {manifest} ({len(samples)} samples)")
    return 0


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.desk_scale:
        cfg = dataclasses.replace(cfg, max_epochs=min(cfg.max_epochs, 20))
    result = train(cfg, resume_from=args.resume)
    print(f"best checkpoint: {result.best_checkpoint} "
          f"(epoch {result.best_epoch}, score {result.best_score:.6g})")
    print(f"training log: {result.log_path}")
    return 0


def _cmd_evaluate(args) -> int:
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV_VAR):
        seed = int(os.environ[SEED_ENV_VAR])
    result = evaluate(args.checkpoint, args.manifest, args.out_dir,
                      split=args.split, seed=seed, max_modes=args.max_modes,
                      specificity_samples=args.specificity_samples,
                      specificity_clouds=args.specificity_clouds,
                      cloud_subsample=args.cloud_subsample)
    print(f"evaluation written: {result.out_dir}")
    for split, value in sorted(result.mean_cd.items()):
        print(f"  mean CD [{split}]: {value:.6g}")
    if result.r_test == result.r_test:
        print(f"  pearson r (test): {result.r_test:.4f}")
    return 0


def _cmd_report(args) -> int:
    result = report(args.runs, args.out)
    print(f"report written: {result.out_dir}")
    print(f"summary: {result.summary_csv}")
    return 0


_COMMANDS = {"generate": _cmd_generate, "train": _cmd_train,
             "evaluate": _cmd_evaluate, "report": _cmd_report}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except WsbvibError as exc:
        print(f"{exc.error_class}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal-error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
