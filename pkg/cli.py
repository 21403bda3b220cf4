#!/usr/bin/env python3
"""
Command-line entry point.

Commands:
  train      train a projection (experiment presets via --experiment)
  eval       multilevel silhouette report of a checkpoint or of raw features
  gradcheck  finite-difference gradient suites
  synth      write a synthetic hierarchical dataset as CSV
  compare    run the experiment presets on identical data and seeds

Exit codes: 0 success, 1 validation error, 2 runtime/numeric error.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError as PydanticValidationError

from dataio import save_csv, synth_generate
from evaluation import SilhouetteReport
from experiment_config import PresetCatalog, SynthSettings, TrainConfig, resolve_config
from dotenv_config import get_run_defaults
from gradcheck import DEFAULT_TRIALS, SuiteResult, run_gradcheck
from projection_model import FeatureStats, load_checkpoint
from rank_embedding_common import (
    ALL_SPLITS,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VALIDATION,
    SPLIT_TRAIN,
    ConfigError,
    NumpyJSONEncoder,
    RankEmbeddingError,
    ValidationError,
    setup_logging,
)
from trainer import CHECKPOINT_FILE, CONFIG_FILE, TrainResult, evaluate_split, prepare_dataset, train, train_tree

logger = logging.getLogger("rank_embedding")

SPLIT_ALL = "all"
BASELINE_EXPERIMENT = "InitEmb"

SYNTH_FLAGS = {
    "coarse": "coarse",
    "fine": "fine_per_coarse",
    "per_class": "per_class",
    "d_in": "d_in",
    "coarse_spread": "coarse_spread",
    "fine_spread": "fine_spread",
    "noise": "noise",
    "synth_seed": "seed",
}

TRAIN_FLAGS = [
    "experiment", "loss", "batch_mode", "batch_size", "d_out", "optimizer", "learning_rate",
    "margin_fine", "margin_coarse", "patience", "max_epochs", "seed", "split_seed", "dataset",
    "holdout_fine_per_coarse", "label_height", "metric", "output_dir",
]


def cmd_train(config: TrainConfig) -> TrainResult:
    return train(config)


def cmd_eval(config: TrainConfig, checkpoint: Optional[str] = None, split: str = "test",
             raw_features: bool = False) -> SilhouetteReport:
    """
    Rebuild the dataset and splits of a config and report silhouettes of one split.

    Args:
        config: Configuration the dataset and splits are rebuilt from
        checkpoint: Checkpoint JSON (required unless raw_features)
        split: train, val, test, alt_test or all
        raw_features: Evaluate standardized input features, no projection
    """
    if checkpoint is None and not raw_features:
        raise ConfigError("eval needs --checkpoint (or --run-dir) unless --raw-features is given")
    dataset = prepare_dataset(config)
    height = train_tree(dataset, config).height
    split_tag = None if split == SPLIT_ALL else split

    if raw_features:
        if checkpoint is not None:
            stats = load_checkpoint(checkpoint).stats
        else:
            stats = FeatureStats.from_features(dataset.select_split(SPLIT_TRAIN).features)
        return evaluate_split(None, dataset, split_tag, height, config.metric, stats=stats)

    model = load_checkpoint(checkpoint)
    return evaluate_split(model, dataset, split_tag, height, config.metric)


def cmd_gradcheck(seed: int = 0, trials: int = DEFAULT_TRIALS) -> List[SuiteResult]:
    return run_gradcheck(seed, trials)


def cmd_synth(settings: SynthSettings, output: str, seed: int = 0) -> str:
    dataset = synth_generate(settings.to_spec(seed))
    save_csv(dataset, output)
    return output


def _cell(value: Optional[float], baseline: Optional[float], show_delta: bool) -> str:
    if value is None:
        return "n/a"
    if not show_delta or baseline is None:
        return f"{value:.3f}"
    return f"{value:.3f} ({value - baseline:+.3f})"


def _merge_preset(overrides: Dict[str, Any], preset: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(overrides)
    merged.update(preset)
    return merged


def cmd_compare(config_file: Optional[str], overrides: Dict[str, Any], seeds: Sequence[int],
                output_root: str, presets: Optional[PresetCatalog] = None,
                experiments: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Train every experiment preset on the same data and seeds.

    Writes `comparison.csv` (per experiment and split, mean scores over seeds)
    under output_root and returns the table with the difference from the
    baseline experiment in brackets.
    """
    presets = presets or PresetCatalog()
    experiments = list(experiments or presets.comparison_order)
    rows: List[Dict[str, Any]] = []
    for seed in seeds:
        for name in experiments:
            # Preset values win over the shared flags; InitEmb keeps max_epochs 0
            run_overrides = _merge_preset(overrides, presets.get_preset(name))
            run_overrides.update({
                "experiment": name,
                "seed": seed,
                "output_dir": os.path.join(output_root, name, f"seed_{seed}"),
            })
            config = resolve_config(config_file, run_overrides, presets)
            logger.info(f"compare: {name} seed {seed}")
            result = train(config)
            for split_tag, report in result.reports.items():
                row = {"experiment": name, "seed": seed, "split": split_tag}
                row.update({level: score for level, score in zip(report.level_names, report.level_scores)})
                row["avSil"] = report.average
                rows.append(row)

    scores = pd.DataFrame(rows)
    value_columns = [c for c in scores.columns if c not in ("experiment", "seed", "split")]
    means = scores.groupby(["experiment", "split"], sort=False)[value_columns].mean().reset_index()
    os.makedirs(output_root, exist_ok=True)
    means.to_csv(os.path.join(output_root, "comparison.csv"), index=False)

    has_baseline = BASELINE_EXPERIMENT in experiments
    table = []
    for name in experiments:
        line: Dict[str, Any] = {"experiment": name}
        for split_tag in means["split"].unique():
            current = means[(means["experiment"] == name) & (means["split"] == split_tag)]
            base = means[(means["experiment"] == BASELINE_EXPERIMENT) & (means["split"] == split_tag)]
            for column in value_columns:
                value = None if current.empty or pd.isna(current[column].iloc[0]) else float(current[column].iloc[0])
                reference = None if base.empty or pd.isna(base[column].iloc[0]) else float(base[column].iloc[0])
                line[f"{split_tag} {column}"] = _cell(value, reference, has_baseline and name != BASELINE_EXPERIMENT)
        table.append(line)
    return pd.DataFrame(table).set_index("experiment")


def _add_synth_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--coarse", type=int, help="Number of coarse classes")
    parser.add_argument("--fine", type=int, help="Fine classes per coarse class")
    parser.add_argument("--per-class", type=int, help="Examples per fine class")
    parser.add_argument("--d-in", type=int, help="Feature dimension")
    parser.add_argument("--coarse-spread", type=float, help="Spread of coarse centers")
    parser.add_argument("--fine-spread", type=float, help="Spread of fine centers around their coarse center")
    parser.add_argument("--noise", type=float, help="Spread of examples around their fine center")
    parser.add_argument("--synth-seed", type=int, help="Generator seed (defaults to --seed)")


def _add_train_arguments(parser: argparse.ArgumentParser, with_seed: bool = True) -> None:
    parser.add_argument("--config", help="JSON (or YAML) config file")
    parser.add_argument("--experiment", help="Experiment preset: InitEmb, QuadL, RbL or RbL_unc")
    parser.add_argument("--loss", choices=["rbl", "quadruplet"], help="Training loss")
    parser.add_argument("--batch-mode", choices=["balanced", "unconstrained"], help="Batch composition")
    parser.add_argument("--batch-size", type=int, help="Examples per batch (default 12)")
    parser.add_argument("--d-out", type=int, help="Embedding dimension (default 3)")
    parser.add_argument("--optimizer", choices=["adam", "sgd"], help="Optimizer (default adam)")
    parser.add_argument("--learning-rate", type=float, help="Learning rate (default 1e-3)")
    parser.add_argument("--margin-fine", type=float, help="Quadruplet fine margin (default 0.25)")
    parser.add_argument("--margin-coarse", type=float, help="Quadruplet coarse margin (default 0.5)")
    parser.add_argument("--patience", type=int, help="Early stopping patience (default 20)")
    parser.add_argument("--max-epochs", type=int, help="Epoch cap (default 200)")
    if with_seed:
        parser.add_argument("--seed", type=int, help="Run seed")
    parser.add_argument("--split-seed", type=int, help="Split seed (defaults to the run seed)")
    parser.add_argument("--dataset", help="Dataset CSV (id,labels,f0,...); synthetic data when omitted")
    parser.add_argument("--holdout-fine-per-coarse", type=int,
                        help="Fine classes per coarse class withheld as the unseen-class test set (0 disables)")
    parser.add_argument("--label-height", type=int, help="Declared hierarchy height")
    parser.add_argument("--metric", choices=["cosine", "euclidean"], help="Silhouette distance")
    parser.add_argument("--output-dir", help="Run directory")
    _add_synth_arguments(parser)


def _overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {flag: getattr(args, flag, None) for flag in TRAIN_FLAGS}
    synth = {field: getattr(args, flag) for flag, field in SYNTH_FLAGS.items()
             if getattr(args, flag, None) is not None}
    if synth:
        overrides["synth"] = synth
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Hierarchical rank-based embedding training and evaluation")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log progress (INFO)")
    parser.add_argument("--debug", action="store_true", help="Log debug details")
    parser.add_argument("--log-file", help="Log file path (defaults to RBL_LOG_FILE)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train_parser = subparsers.add_parser("train", help="Train a projection")
    _add_train_arguments(train_parser)

    eval_parser = subparsers.add_parser("eval", help="Report silhouettes of a checkpoint")
    eval_parser.add_argument("--run-dir", help="Run directory holding config.json and best_checkpoint.json")
    eval_parser.add_argument("--checkpoint", help="Checkpoint JSON")
    eval_parser.add_argument("--config", help="Config the dataset and splits are rebuilt from")
    eval_parser.add_argument("--dataset", help="Dataset CSV overriding the config's data source")
    eval_parser.add_argument("--split", default="test", choices=list(ALL_SPLITS) + [SPLIT_ALL],
                             help="Split to evaluate (default test)")
    eval_parser.add_argument("--raw-features", action="store_true",
                             help="Evaluate standardized input features without the projection")
    eval_parser.add_argument("--metric", choices=["cosine", "euclidean"], help="Silhouette distance")

    grad_parser = subparsers.add_parser("gradcheck", help="Check analytic gradients by finite differences")
    grad_parser.add_argument("--seed", type=int, default=0, help="Seed of the random trials")
    grad_parser.add_argument("--trials", type=int, default=DEFAULT_TRIALS, help="Trials per suite")

    synth_parser = subparsers.add_parser("synth", help="Write a synthetic dataset CSV")
    _add_synth_arguments(synth_parser)
    synth_parser.add_argument("--seed", type=int, default=0, help="Generator seed")
    synth_parser.add_argument("--output", required=True, help="Output CSV path")

    compare_parser = subparsers.add_parser("compare", help="Run all experiment presets and tabulate results")
    _add_train_arguments(compare_parser, with_seed=False)
    compare_parser.add_argument("--seeds", type=int, nargs="+", default=[0], help="Run seeds")
    compare_parser.add_argument("--experiments", nargs="+", help="Presets to run (default: all, baseline first)")
    return parser


def _print_json(payload: Any) -> None:
    print(json.dumps(payload, indent=2, cls=NumpyJSONEncoder))


def _run(args: argparse.Namespace) -> int:
    if args.command == "train":
        config = resolve_config(args.config, _overrides_from_args(args))
        result = cmd_train(config)
        _print_json(result.to_dict())
        return EXIT_OK

    if args.command == "eval":
        config_file = args.config
        checkpoint = args.checkpoint
        if args.run_dir:
            config_file = config_file or os.path.join(args.run_dir, CONFIG_FILE)
            checkpoint = checkpoint or os.path.join(args.run_dir, CHECKPOINT_FILE)
        config = resolve_config(config_file, {"dataset": args.dataset, "metric": args.metric})
        report = cmd_eval(config, checkpoint, args.split, args.raw_features)
        _print_json(report.to_dict())
        return EXIT_OK

    if args.command == "gradcheck":
        results = cmd_gradcheck(args.seed, args.trials)
        _print_json([
            {"suite": r.name, "trials": r.trials, "max_relative_error": r.max_relative_error, "passed": r.passed}
            for r in results
        ])
        return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME

    if args.command == "synth":
        fields = {field: getattr(args, flag) for flag, field in SYNTH_FLAGS.items()
                  if getattr(args, flag, None) is not None}
        try:
            settings = SynthSettings(**fields)
        except PydanticValidationError as e:
            raise ConfigError(f"invalid synthetic dataset settings: {e}") from e
        path = cmd_synth(settings, args.output, args.seed)
        print(f"Wrote {path}")
        return EXIT_OK

    if args.command == "compare":
        overrides = _overrides_from_args(args)
        output_root = overrides.pop("output_dir") or os.path.join(get_run_defaults()["output_root"], "compare")
        overrides.pop("experiment", None)
        table = cmd_compare(args.config, overrides, args.seeds, output_root, experiments=args.experiments)
        print(table.to_markdown())
        return EXIT_OK

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    # Without a flag the level comes from RBL_LOG_LEVEL
    level = None
    if args.verbose:
        level = logging.INFO
    if args.debug:
        level = logging.DEBUG
    setup_logging(level, args.log_file)

    try:
        return _run(args)
    except ValidationError as e:
        logger.error(f"{args.command}: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RankEmbeddingError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
