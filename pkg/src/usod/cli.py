"""Command-line entry point: ``usod <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, pipeline
from .backbone import BackboneError
from .config import ConfigError, load_config
from .data import DatasetError
from .synthetic import make_synthetic_dataset

log = logging.getLogger("usod")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--tiny", action="store_true", help="start from the desk-scale profile")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable), e.g. --set stage1.epochs=5")
    p.add_argument("--workdir", type=Path)
    p.add_argument("--data-root", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usod", description=__doc__)
    parser.add_argument("--version", action="version", version=f"usod {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stage1-train", help="train the SE heads with the ADB loss")
    _common(p)

    p = sub.add_parser("extract", help="write stage-1 pseudo labels for the training split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="default: <workdir>/stage1/checkpoint.pt")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("stage2-train", help="train the detector on pseudo labels with OLR")
    _common(p)
    p.add_argument("--pseudo-dir", type=Path, help="default: <workdir>/pseudo/init")

    p = sub.add_parser("infer", help="write saliency maps for a dataset")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="default: <workdir>/stage2/checkpoint.pt")
    p.add_argument("--dataset", action="append", help="NAME or NAME:SPLIT; default: test_datasets")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--dataset", action="append", help="NAME or NAME:SPLIT; default: test_datasets")
    p.add_argument("--predictions", type=Path, help="prediction directory (single dataset only)")
    p.add_argument("--reports", type=Path)

    p = sub.add_parser("ablate", help="run ablation cells")
    _common(p)
    p.add_argument("cells", nargs="+", help="A0..A3, DB1..DB5, alpha=X, lambda=X, RAM, CONV, OLR-on, OLR-off")

    p = sub.add_parser("synth", help="write a synthetic dataset for smoke tests")
    p.add_argument("root", type=Path)
    p.add_argument("--name", default="MSRA-B")
    p.add_argument("-n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.0)
    return parser


def _config(args):
    overrides = list(args.overrides)
    for key, attr in (("workdir", "workdir"), ("data_root", "data_root"), ("seed", "seed")):
        value = getattr(args, attr)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides, tiny=args.tiny)


def _datasets(args, cfg) -> list[tuple[str, str]]:
    if not args.dataset:
        return cfg.test_sets()
    out = []
    for entry in args.dataset:
        name, _, split = entry.partition(":")
        out.append((name, split or "all"))
    return out


def run(args) -> int:
    if args.command == "synth":
        n_test = int(round(args.n * args.test_fraction))
        splits = {"train": args.n - n_test, "test": n_test} if n_test else None
        make_synthetic_dataset(args.root, args.name, args.n, seed=args.seed, splits=splits)
        print(args.root / args.name)
        return 0

    cfg = _config(args)
    work = Path(cfg.workdir)
    if args.command == "stage1-train":
        print(pipeline.run_stage1_train(cfg))
    elif args.command == "extract":
        print(pipeline.run_extract(cfg, args.checkpoint or work / "stage1" / "checkpoint.pt", args.out))
    elif args.command == "stage2-train":
        print(pipeline.run_stage2_train(cfg, args.pseudo_dir or work / "pseudo" / "init"))
    elif args.command == "infer":
        ckpt = args.checkpoint or work / "stage2" / "checkpoint.pt"
        sets = _datasets(args, cfg)
        if args.out and len(sets) > 1:
            raise ConfigError("--out needs exactly one --dataset")
        for name, split in sets:
            print(pipeline.run_infer(cfg, ckpt, name, split, args.out))
    elif args.command == "eval":
        sets = _datasets(args, cfg)
        if args.predictions and len(sets) > 1:
            raise ConfigError("--predictions needs exactly one --dataset")
        for name, split in sets:
            report = pipeline.run_eval(cfg, name, split, args.predictions, args.reports)
            sys.stdout.write(report.table())
    elif args.command == "ablate":
        path = pipeline.run_ablation(cfg, args.cells)
        sys.stdout.write(path.read_text())
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, DatasetError, BackboneError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"usod: error: {exc}", file=sys.stderr)
        return 2
    except pipeline.TrainingDiverged as exc:
        print(f"usod: diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
