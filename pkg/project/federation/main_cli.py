"""
MLaaS federation engine.

Command-line version.

Created by Matua Doc.
Created on 2026-10-19.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

from main_config import ExperimentConfig, load_config
from main_controller_cli import (cmd_evaluate, cmd_ingest, cmd_pathways,
                                 cmd_plot, cmd_synthesize, cmd_train)
from main_environment import SyntheticProviderParams
from main_model import BoxFormat, ConfigError, Coordinates, FederationError


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """Add the flags that override experiment config fields."""
    parser.add_argument("--config", type=Path,
                        help="YAML experiment config")
    parser.add_argument("--trace", type=Path, help="trace file")
    parser.add_argument("--output-dir", type=Path,
                        help="folder for checkpoints, logs and reports")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--steps-per-epoch", type=int)
    parser.add_argument("--beta", type=float,
                        help="cost weight in the reward (<= 0)")
    parser.add_argument("--mode", choices=["with_gt", "without_gt"],
                        help="accuracy reference of the reward")
    parser.add_argument("--seed", type=int,
                        help="use this value for every named seed")
    parser.add_argument("--template", type=Path,
                        help="template categories, one per line")
    parser.add_argument("--lexicon", type=Path,
                        help="synonym lexicon, word<TAB>syn1,syn2")
    parser.add_argument("--overrides", type=Path,
                        help="label<TAB>category overrides")
    parser.add_argument("--prefer-cheap", action="store_true", default=None,
                        help="break oracle ties towards the cheaper action")


def config_of(args: argparse.Namespace) -> ExperimentConfig:
    """Load the config file and apply the command-line overrides."""
    overrides: dict[str, Any] = {
        "trace": args.trace, "output_dir": args.output_dir,
        "epochs": args.epochs, "steps_per_epoch": args.steps_per_epoch,
        "reward.beta": args.beta, "reward.mode": args.mode,
        "template": args.template, "lexicon": args.lexicon,
        "overrides": args.overrides, "prefer_cheap": args.prefer_cheap}
    if args.seed is not None:
        for name in ("env_seed", "init_seed", "explore_seed",
                     "baseline_seed"):
            overrides[f"seeds.{name}"] = args.seed
    return load_config(args.config, overrides)


def parse_category_recalls(items: list[str]) -> dict[str, float]:
    """Turn LABEL=P items into a recall mapping."""
    recalls = {}
    for item in items:
        label, separator, value = item.partition("=")
        try:
            if not separator or not label:
                raise ValueError
            recalls[label] = float(value)
        except ValueError:
            raise ConfigError(f"Expected LABEL=P, got '{item}'")
    return recalls


def build_parser() -> argparse.ArgumentParser:
    """Return the parser for every verb."""
    parser = argparse.ArgumentParser(
        prog="federation",
        description="Pick which MLaaS detection providers to query.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="show debug logging")
    verbs = parser.add_subparsers(dest="verb", required=True)

    ingest = verbs.add_parser("ingest", help="compile raw dumps to a trace")
    ingest.add_argument("--provider", type=Path, action="append",
                        required=True, dest="providers",
                        help="provider dump (JSON keyed by image id)")
    ingest.add_argument("--name", action="append", dest="names",
                        help="provider name, one per --provider")
    ingest.add_argument("--features", type=Path, required=True)
    ingest.add_argument("--gt", type=Path)
    ingest.add_argument("--box-format", choices=["xyxy", "xywh"],
                        default="xyxy")
    ingest.add_argument("--coordinates", choices=["pixel", "normalized"],
                        default="pixel")
    ingest.add_argument("--out", type=Path, required=True)

    synthesize = verbs.add_parser("synthesize",
                                  help="add synthetic providers")
    synthesize.add_argument("--base", type=Path,
                            help="trace to extend (default: fresh GT)")
    synthesize.add_argument("-k", type=int, required=True,
                            help="number of synthetic providers")
    synthesize.add_argument("--routing", action="store_true",
                            help="build the feature-routed scenario")
    synthesize.add_argument("--images", type=int, default=2000)
    synthesize.add_argument("--feature-dim", type=int, default=8)
    synthesize.add_argument("--recall", type=float,
                            help="same recall for every provider")
    synthesize.add_argument("--category-recall", action="append",
                            metavar="LABEL=P", dest="category_recalls",
                            help="recall for one category; others use "
                                 "--recall (default 0)")
    synthesize.add_argument("--jitter", type=float, default=0.0)
    synthesize.add_argument("--fp-rate", type=float, default=0.0)
    synthesize.add_argument("--graded", type=float, nargs=2,
                            default=(0.26, 0.535), metavar=("LOW", "HIGH"),
                            help="recall range when --recall is not given")
    synthesize.add_argument("--seed", type=int, default=0)
    synthesize.add_argument("--out", type=Path, required=True)

    train = verbs.add_parser("train", help="train the agent")
    add_config_flags(train)
    train.add_argument("--resume", action="store_true",
                       help="continue from the checkpoint")

    evaluate = verbs.add_parser("evaluate", help="run selectors")
    add_config_flags(evaluate)
    evaluate.add_argument("--method", action="append", dest="methods",
                          required=True,
                          help="random1, randomN, ensembleN, oracle, "
                               "agent, provider:<i> or combination:<bits>")
    evaluate.add_argument("--checkpoint", type=Path)
    evaluate.add_argument("--stem", default="report")

    oracle = verbs.add_parser("oracle", help="evaluate --method oracle")
    add_config_flags(oracle)

    pathways = verbs.add_parser("pathways",
                                help="compare voting/ablation pathways")
    add_config_flags(pathways)

    plot = verbs.add_parser("plot", help="draw training curves")
    plot.add_argument("logs", type=Path, nargs="*")
    plot.add_argument("--label", action="append", dest="labels")
    plot.add_argument("--out", type=Path, required=True)

    return parser


def run(args: argparse.Namespace) -> None:
    """Dispatch to the command handler for a verb."""
    match args.verb:
        case "ingest":
            cmd_ingest(args.providers, args.features, args.out, args.gt,
                       args.names, BoxFormat(args.box_format),
                       Coordinates(args.coordinates))
        case "synthesize":
            params = None
            if args.category_recalls:
                params = SyntheticProviderParams(
                    recall=parse_category_recalls(args.category_recalls),
                    unlisted_recall=args.recall or 0.0,
                    jitter=args.jitter, fp_rate=args.fp_rate)
            elif args.recall is not None:
                params = SyntheticProviderParams(
                    recall=args.recall, jitter=args.jitter,
                    fp_rate=args.fp_rate)
            cmd_synthesize(args.out, args.k, args.seed, args.base, params,
                           args.routing, args.images, args.feature_dim,
                           tuple(args.graded))
        case "train":
            cmd_train(config_of(args), args.resume)
        case "evaluate":
            cmd_evaluate(config_of(args), args.methods, args.checkpoint,
                         args.stem)
        case "oracle":
            cmd_evaluate(config_of(args), ["oracle"], stem="oracle")
        case "pathways":
            cmd_pathways(config_of(args))
        case "plot":
            cmd_plot(args.logs, args.out, args.labels)


def main(argv: list[str] | None = None) -> int:
    """Run the command line and return the exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        run(args)
    except FederationError as error:
        line = json.dumps({"kind": error.kind, "message": str(error)})
        print(f"error: {line}", file=sys.stderr)
        return 1
    except ValueError as error:
        line = json.dumps({"kind": "ValueError", "message": str(error)})
        print(f"error: {line}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
