"""Command-line entry point: ``pgpsam <subcommand> [--config F] [--seed S] [--out DIR] [--set k=v ...]``.

Exit codes: 0 success, 1 usage/configuration error, 2 data or I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import CONFIG_VERSION, load_config
from .data import DATASET_VERSION, generate_dataset
from .errors import DataError, NumericError, PgpSamError
from .harness import METRICS_VERSION, full_model_grad_check, run_ablation, run_eval, run_few_shot
from .pipeline import CHECKPOINT_VERSION

GRADCHECK_THRESHOLD = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def version_text() -> str:
    return (
        f"pgpsam {__version__} (config v{CONFIG_VERSION}, dataset v{DATASET_VERSION}, "
        f"checkpoint v{CHECKPOINT_VERSION}, metrics v{METRICS_VERSION})"
    )


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="overrides config and $PGP_SEED")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pgpsam", description="Few-shot prototype-guided prompt learning harness.")
    parser.add_argument("--version", action="version", version=version_text())
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    sub.add_parser("train", parents=[common], help="few-shot training + held-out evaluation")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    ev.add_argument("--checkpoint", help="defaults to <out>/checkpoint.bin")
    sub.add_parser("ablate", parents=[common], help="four-row module ablation over ablation_seeds")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full loss")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--max-elements", type=int, default=10_000)
    return parser


def _run(args) -> int:
    cfg = load_config(args.config, args.set, seed=args.seed, out_dir=args.out)
    if args.command == "gen-data":
        root = Path(cfg.data_dir) if cfg.data_dir else Path(cfg.out_dir) / "data"
        ds = generate_dataset(
            root, cfg.dataset_seed, n_classes=cfg.n_classes, image_size=cfg.image_size,
            train_size=cfg.train_size, test_size=cfg.test_size,
            class_fraction=cfg.class_fraction, noise_std=cfg.noise_std,
        )
        print(f"wrote {len(ds.train)} train / {len(ds.test)} test samples to {root}")
    elif args.command == "train":
        rep = run_few_shot(cfg)
        print(json.dumps({"run_id": rep.run_id, "mean_dice": rep.mean_dice, "per_class_dice": rep.per_class_dice}))
    elif args.command == "eval":
        ckpt = args.checkpoint or Path(cfg.out_dir) / "checkpoint.bin"
        rep = run_eval(cfg, ckpt)
        print(json.dumps({"run_id": rep.run_id, "mean_dice": rep.mean_dice, "per_class_dice": rep.per_class_dice}))
    elif args.command == "ablate":
        rows = run_ablation(cfg)
        for r in rows:
            print(f"cfm={int(r['cfm'])} ppg={int(r['ppg'])} ppr={int(r['ppr'])} dice_mean={r['dice_mean']:.4f}")
        print(f"wrote {Path(cfg.out_dir) / 'ablation.csv'}")
    elif args.command == "gradcheck":
        rep = full_model_grad_check(cfg.seed, eps=args.eps, max_elements=args.max_elements)
        ok = rep.passed(GRADCHECK_THRESHOLD)
        print(f"max relative error {rep.max_rel_error:.3e} over {rep.n_checked} entries: "
              f"{'PASS' if ok else 'FAIL'} (threshold {GRADCHECK_THRESHOLD:g})")
        if not ok:
            return NumericError.exit_code
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("pgpsam: error: a subcommand is required", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return _run(args)
    except PgpSamError as exc:
        print(f"pgpsam {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"pgpsam {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
