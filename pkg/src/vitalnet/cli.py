"""Command line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 gradcheck failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from . import harness as Hn
from .data import ManifestError
from .preprocess import FitError, SchemaError
from .tensor import DimensionError
from .thoam import CheckpointError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3

VALIDATION_ERRORS = (Hn.ConfigError, ManifestError, SchemaError, FitError, CheckpointError, DimensionError)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="model / training seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="dataset directory (holds manifest.jsonl)")
    common.add_argument("--hardened", action="store_true", help="apply the hardened synthetic settings")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field (value parsed as JSON if possible)")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    p = argparse.ArgumentParser(prog="vitalnet", description="Tri-modal attention fusion experiments.")
    p.add_argument("--version", action="version", version=f"vitalnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset to --dataset")
    sub.add_parser("train", parents=[common], help="train one model; checkpoints and log under --out")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="defaults to <out>/checkpoint_final.ckpt")
    ev.add_argument("--split", default="test", choices=("train", "test"))
    sub.add_parser("ablate", parents=[common], help="train and test all seven modality subsets")
    sub.add_parser("compare-fusion", parents=[common], help="concatenation baseline vs attention fusion")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full pipeline")
    return p


def resolve_config(args) -> Hn.ExperimentConfig:
    fields = Hn.ExperimentConfig().to_json()
    if args.config:
        fields.update(Hn.ExperimentConfig.load(args.config).to_json())
    if args.hardened:
        fields.update(Hn.HARDENED_OVERRIDES)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise Hn.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        fields[key] = _parse_value(value)
    for name in ("seed", "out", "dataset"):
        value = getattr(args, name)
        if value is not None:
            fields[name] = value
    return Hn.ExperimentConfig.from_dict(fields)


def run(args) -> int:
    cfg = resolve_config(args)
    if args.command == "generate":
        path = Hn.cmd_generate(cfg)
        print(f"wrote {path}")
    elif args.command == "train":
        result = Hn.cmd_train(cfg)
        last = result.log[-1]
        print(f"trained {cfg.epochs} epochs: loss {last['train_loss']:.4f} acc {last['train_acc']:.4f} -> {cfg.out}")
    elif args.command == "eval":
        report = Hn.cmd_eval(cfg, args.checkpoint, args.split)
        print(f"{args.split} accuracy {report.accuracy:.4f} macro AUC {report.macro_auc}")
    elif args.command == "ablate":
        for row in Hn.cmd_ablate(cfg):
            print(f"{row['subset']:<4} acc {row['accuracy']:.4f} auc {row['macro_auc']}")
    elif args.command == "compare-fusion":
        for row in Hn.cmd_compare_fusion(cfg):
            print(f"{row['fusion']:<7} acc {row['accuracy']:.4f} auc {row['macro_auc']}")
    elif args.command == "gradcheck":
        ok, err = Hn.cmd_gradcheck(cfg)
        print(f"gradcheck max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {Hn.GRADCHECK_TOL:g})")
        if not ok:
            return EXIT_GRADCHECK
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # anything else is a runtime failure, not a usage error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
