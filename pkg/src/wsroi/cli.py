"""Command line entry point: ``wsroi <stage> [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config, parse_value
from .extractor import TAP_NAMES

log = logging.getLogger("wsroi")


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def tap_list(text: str) -> list[str]:
    taps = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in taps if t not in TAP_NAMES]
    if bad or not 1 <= len(taps) <= 2:
        raise argparse.ArgumentTypeError(f"--taps takes one or two of {','.join(TAP_NAMES)}, got {text!r}")
    return taps


def int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


# flag dest -> dotted config key, per stage
COMMON = {"seed": "seed", "out": "out", "data": "data.root", "size": "data.size"}
STAGE_KEYS = {
    "synth": {"n": "data.synth_n", "split": "data.split_ratio"},
    "train-classifier": {
        "epochs": "classifier_train.epochs", "lr": "classifier_train.lr",
        "batch_size": "classifier_train.batch_size", "widths": "classifier.widths",
        "convs": "classifier.convs_per_block", "weights": "classifier.weights",
    },
    "gen-pseudo": {"threshold": "pseudo_threshold"},
    "train-extractor": {
        "epochs": "extractor_train.epochs", "lr": "extractor_train.lr0",
        "batch_size": "extractor_train.batch_size", "width": "extractor.base_width",
        "tau": "extractor_train.tau", "taps": "extractor_train.contrastive_taps",
        "n_max": "extractor_train.n_max", "k_max": "extractor_train.k_max",
        "projection_dim": "extractor.projection_dim", "norm": "extractor.norm",
    },
    "evaluate": {"taps": "extractor_train.contrastive_taps"},
    "plot": {},
}


def _variant_flags(p):
    p.add_argument("--taps", type=tap_list, help="contrastive taps, e.g. up1,up2 (default)")
    p.add_argument("--ablate", choices=["no-contrast"], help="drop the contrastive terms")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsroi", description="Weakly supervised ROI extraction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config file; flags override it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="dataset root with train/ and test/ splits")
        p.add_argument("--seed", type=int)
        p.add_argument("--size", type=positive_int, help="square input size")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. --set extractor_train.tau=0.1")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = stage("synth", "write a synthetic dataset")
    p.add_argument("--n", type=positive_int)
    p.add_argument("--split", type=float, help="train fraction (default 0.8)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = stage("train-classifier", "train the scene classifier")
    p.add_argument("--epochs", type=positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--widths", type=int_list, help="five comma-separated block widths")
    p.add_argument("--convs", type=int_list, help="five comma-separated conv counts per block")
    p.add_argument("--weights", help="start from these classifier weights instead of random init")

    p = stage("gen-pseudo", "generate Grad-CAM pseudo labels for the training split")
    p.add_argument("--threshold", type=float)
    p.add_argument("--heatmaps", action="store_true", help="also write per-layer heatmaps")

    p = stage("train-extractor", "train the UNet extractor on pseudo labels")
    p.add_argument("--epochs", type=positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--width", type=positive_int, help="UNet base width")
    p.add_argument("--tau", type=float)
    p.add_argument("--n-max", type=positive_int)
    p.add_argument("--k-max", type=positive_int)
    p.add_argument("--projection-dim", type=positive_int)
    p.add_argument("--norm", choices=["batch", "group", "none"], help="normalisation after each UNet conv")
    _variant_flags(p)

    p = stage("evaluate", "score a trained extractor against ground truth")
    p.add_argument("--split", choices=["train", "test"], default="test")
    _variant_flags(p)

    stage("plot", "render ROC/PR curves from saved reports")
    return parser


def config_from_args(args):
    overrides = {}
    for dest, key in {**COMMON, **STAGE_KEYS[args.command]}.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "ablate", None) == "no-contrast":
        overrides["extractor_train.contrastive_enabled"] = False
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = parse_value(value)
    return load_config(args.config, overrides)


def _setup_logging(out: str | None, verbose: bool):
    handlers = [logging.StreamHandler(sys.stderr)]
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(Path(out) / "run.log"))
    fmt = logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s")
    # repeated main() calls in one process must not stack handlers
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    for h in handlers:
        h.setFormatter(fmt)
        log.addHandler(h)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ValueError, TypeError) as exc:
        parser.error(str(exc))
    # synth writes into --out itself, which must start empty
    _setup_logging(None if args.command == "synth" else cfg.out, args.verbose)
    try:
        if args.command == "synth":
            pipeline.run_synth(cfg, cfg.out, force=args.force)
        elif args.command == "train-classifier":
            pipeline.run_train_classifier(cfg)
        elif args.command == "gen-pseudo":
            pipeline.run_gen_pseudo(cfg, heatmaps=args.heatmaps)
        elif args.command == "train-extractor":
            pipeline.run_train_extractor(cfg)
        elif args.command == "evaluate":
            pipeline.run_evaluate(cfg, split=args.split)
        elif args.command == "plot":
            for path in pipeline.run_plot(cfg):
                print(path)
    except (RuntimeError, OSError, KeyError, ValueError) as exc:  # StageError is a RuntimeError
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
