"""
MLaaS federation engine.

Controller for the command-line version: one handler per verb.

Created by Matua Doc.
Created on 2026-10-19.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from main_agent import agent_from_checkpoint, train, TrainingLog
from main_baselines import (agent_report, BaselineReport, brute_force_oracle,
                            combination_report, compare_pathways,
                            ensemble_all, PathwayResult, provider_report,
                            random_one, random_subset, save_reports)
from main_config import ExperimentConfig, write_resolved
from main_ensemble import EnsembleConfig
from main_environment import (build_ground_truth_trace, build_routing_trace,
                              compile_trace, FederationEnv,
                              graded_provider_params, load_provider_dump,
                              ProviderCostModel, ProviderLatencyModel,
                              synthesize_providers, SyntheticProviderParams,
                              Trace)
from main_grouping import (clean_label, GroupingTable, identity_grouping,
                           load_grouping)
from main_model import (BoxFormat, CheckpointMissing, ConfigError,
                        Coordinates, EmptyLog, UnknownMethod)
from main_utils import format_cost, read_json
from main_view_qt import LineChart

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"
TRAINING_LOG_NAME = "training_log.csv"
METHODS = ("random1", "randomN", "ensembleN", "oracle", "agent")


def cmd_ingest(provider_paths: list[Path], features_path: Path,
               out_path: Path, gt_path: Path | None = None,
               names: list[str] | None = None,
               box_format: BoxFormat = BoxFormat.XYXY,
               coordinates: Coordinates = Coordinates.PIXEL) -> Trace:
    """
    Compile provider dumps, features and ground truth into a trace file.

    Provider names default to the dump file names without extension.
    """
    if not provider_paths:
        raise ConfigError("At least one provider dump is needed")
    names = names or [path.stem for path in provider_paths]
    if len(names) != len(provider_paths) or len(set(names)) != len(names):
        raise ConfigError("Provider names must be unique, one per dump")

    dumps = {name: load_provider_dump(path)
             for name, path in zip(names, provider_paths)}
    features = read_json(features_path)
    gt = read_json(gt_path) if gt_path is not None else None
    trace = compile_trace(dumps, features, gt, box_format, coordinates)
    trace.save(out_path)

    print(f"Wrote {len(trace)} records to {out_path}")
    for number, name in enumerate(trace.header.provider_names):
        count = sum(len(record.per_provider[number])
                    for record in trace.records)
        print(f"  {name}: {count} detections")
    return trace


def cmd_synthesize(out_path: Path, k: int, seed: int = 0,
                   base_path: Path | None = None,
                   params: SyntheticProviderParams | None = None,
                   routing: bool = False, n_images: int = 2000,
                   feature_dim: int = 8,
                   graded_range: tuple[float, float] = (0.26, 0.535)
                   ) -> Trace:
    """
    Write a trace with k synthetic providers.

    With a base trace, k providers are appended to it. Without one, a
    fresh ground-truth trace of n_images is drawn first; with routing,
    the trace is instead the routing scenario with k providers. When no
    params are given, recall is graded across graded_range.
    """
    if routing:
        trace = build_routing_trace(n_images, k, feature_dim, seed)
    else:
        if base_path is not None:
            base = Trace.load(base_path)
        else:
            base = build_ground_truth_trace(n_images, feature_dim, seed=seed)
        chosen = params or graded_provider_params(k, *graded_range)
        trace = synthesize_providers(base, k, chosen, seed)
    trace.save(out_path)
    print(f"Wrote {len(trace)} records for {trace.n_providers} providers "
          f"to {out_path}")
    return trace


def _categories_of(trace: Trace) -> list[str]:
    """Return the categories of a trace without a grouping template."""
    labels = trace.ground_truth_labels()
    if labels:
        return labels
    found = {clean_label(raw.label) for record in trace.records
             for raws in record.per_provider for raw in raws}
    return sorted(found)


def build_table(config: ExperimentConfig, trace: Trace) -> GroupingTable:
    """Load the grouping files, or group labels only with themselves."""
    if config.template is None:
        return identity_grouping(_categories_of(trace))
    return load_grouping(config.template, config.lexicon, config.overrides)


def make_env(config: ExperimentConfig, trace: Trace, table: GroupingTable,
             ensemble: EnsembleConfig | None = None) -> FederationEnv:
    """Build the environment a config describes."""
    n = trace.n_providers
    try:
        costs = (ProviderCostModel(config.unit_costs)
                 if config.unit_costs is not None
                 else ProviderCostModel.uniform(n))
        latency = ProviderLatencyModel(
            config.transmission or [0.0] * n,
            config.inference or [0.0] * n)
    except ValueError as error:
        raise ConfigError(str(error))
    for name, values in (("unit_costs", costs.unit_costs),
                         ("transmission", latency.transmission),
                         ("inference", latency.inference)):
        if len(values) != n:
            raise ConfigError(f"{name} has {len(values)} entries but the "
                              f"trace has {n} providers")

    return FederationEnv(trace, table, ensemble or config.ensemble,
                         config.reward, costs, latency,
                         config.seeds.env_seed)


def _load(config: ExperimentConfig) -> tuple[Trace, GroupingTable]:
    """Validate a config, then load its trace and grouping table."""
    config.validate(need_trace=True)
    trace = Trace.load(Path(config.trace))
    return trace, build_table(config, trace)


def cmd_train(config: ExperimentConfig, resume: bool = False) -> TrainingLog:
    """Train the agent, writing checkpoints and the per-epoch log."""
    trace, table = _load(config)
    out_dir = Path(config.output_dir)
    write_resolved(config, "train")
    env = make_env(config, trace, table)
    logger.info("Training on %d records, %d providers, %s reward",
                len(trace), trace.n_providers, config.reward.mode)

    result = train(env, config.sac, config.seeds.training, config.epochs,
                   config.steps_per_epoch, out_dir / CHECKPOINT_NAME,
                   resume)
    log_path = out_dir / TRAINING_LOG_NAME
    result.log.save_csv(log_path)

    last = result.log.rows[-1]
    print(f"Epoch {last.epoch}: AP50 {last.test_ap50:.4f}, "
          f"mAP {last.test_map:.4f}, "
          f"cost {format_cost(last.episode_cost)}")
    print(f"Log written to {log_path}")
    return result.log


def _check_method(method: str, n_providers: int) -> None:
    """Raise UnknownMethod unless the evaluation method exists."""
    if method in METHODS:
        return
    name, _, value = method.partition(":")
    if name == "provider" and value.isdigit():
        if int(value) < n_providers:
            return
        raise UnknownMethod(f"Provider {value} is out of range for "
                            f"{n_providers} providers")
    if name == "combination" and value and set(value) <= {"0", "1"}:
        if len(value) == n_providers and "1" in value:
            return
        raise UnknownMethod(f"Combination {value} must have {n_providers} "
                            f"bits with at least one set")
    raise UnknownMethod(f"Unknown method '{method}'; expected one of "
                        f"{', '.join(METHODS)}, provider:<i> or "
                        f"combination:<bits>")


def cmd_evaluate(config: ExperimentConfig, methods: list[str],
                 checkpoint: Path | None = None,
                 stem: str = "report") -> list[BaselineReport]:
    """
    Run each named selector over the trace in order and save a report.

    Every method name is checked before anything runs.
    """
    trace, table = _load(config)
    for method in methods:
        _check_method(method, trace.n_providers)
    checkpoint = checkpoint or Path(config.output_dir) / CHECKPOINT_NAME
    if "agent" in methods and not checkpoint.exists():
        raise CheckpointMissing(f"No checkpoint at {checkpoint}")

    write_resolved(config, "evaluate")
    env = make_env(config, trace, table)
    seed = config.seeds.baseline_seed
    reports = []
    for method in methods:
        match method:
            case "random1":
                report = random_one(env, seed)
            case "randomN":
                report = random_subset(env, seed)
            case "ensembleN":
                report = ensemble_all(env)
            case "oracle":
                report = brute_force_oracle(env, config.prefer_cheap,
                                            config.oracle_max_providers)
            case "agent":
                report = agent_report(env, agent_from_checkpoint(checkpoint))
            case _ if method.startswith("combination:"):
                bits = method.partition(":")[2]
                report = combination_report(
                    env, np.array([int(bit) for bit in bits]))
            case _:
                report = provider_report(env, int(method.partition(":")[2]))
        reports.append(report)

    names = trace.header.provider_names
    path = save_reports(reports, names, Path(config.output_dir), stem)
    for report in reports:
        counts = ", ".join(f"{name} {count}" for name, count
                           in zip(names, report.selection_counts))
        print(f"{report.method}: mAP {report.map:.4f}, "
              f"AP50 {report.ap50:.4f}, "
              f"cost {format_cost(report.episode_cost)} ({counts})")
    print(f"Report written to {path}")
    return reports


def cmd_pathways(config: ExperimentConfig) -> list[PathwayResult]:
    """Compare Ensemble-N under every voting and ablation pathway."""
    trace, table = _load(config)
    write_resolved(config, "pathways")
    results = compare_pathways(
        lambda ensemble: make_env(config, trace, table, ensemble),
        config.ensemble)

    out_dir = Path(config.output_dir)
    path = out_dir / "pathways.csv"
    frame = pd.DataFrame([vars(result) for result in results])
    frame.to_csv(path, index=False, float_format="%.6f")
    for result in results:
        print(f"{result.pathway:<24} mAP {result.map:.4f}  "
              f"AP50 {result.ap50:.4f}  AP75 {result.ap75:.4f}")
    print(f"Pathways written to {path}")
    return results


def _read_log(path: Path) -> pd.DataFrame:
    """Read one training log, raising EmptyLog if it has no epochs."""
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise ConfigError(f"No such log file: {path}")
    except pd.errors.EmptyDataError:
        raise EmptyLog(f"{path} is empty")
    if frame.empty:
        raise EmptyLog(f"{path} has no epochs")
    missing = {"epoch", "test_ap50", "episode_cost"} - set(frame.columns)
    if missing:
        raise ConfigError(f"{path} is missing columns {sorted(missing)}")
    return frame


def cmd_plot(log_paths: list[Path], out_dir: Path,
             labels: list[str] | None = None) -> list[Path]:
    """
    Draw AP50 and cost per epoch, one series per log, plus a summary CSV.

    Returns the paths written.
    """
    if not log_paths:
        raise EmptyLog("No training logs given")
    labels = labels or [path.parent.name or path.stem for path in log_paths]
    if len(labels) != len(log_paths):
        raise ConfigError("Give one label per log")

    accuracy = LineChart("Test AP50 per epoch", "Epoch", "AP50")
    cost = LineChart("Average cost per test episode", "Epoch",
                     "Cost (10^-3 USD)")
    summary = []
    for label, path in zip(labels, log_paths):
        frame = _read_log(path)
        epochs = frame["epoch"].astype(float).tolist()
        accuracy.add_series(label, epochs,
                            frame["test_ap50"].astype(float).tolist())
        cost.add_series(label, epochs,
                        frame["episode_cost"].astype(float).tolist())
        summary.append({"label": label, "epochs": len(frame),
                        "final_ap50": frame["test_ap50"].iloc[-1],
                        "best_ap50": frame["test_ap50"].max(),
                        "final_cost": frame["episode_cost"].iloc[-1],
                        "mean_cost": frame["episode_cost"].mean()})

    out_dir.mkdir(parents=True, exist_ok=True)
    written = [accuracy.save(out_dir / "ap50_vs_epoch.png"),
               cost.save(out_dir / "cost_vs_epoch.png")]
    summary_path = out_dir / "summary.csv"
    pd.DataFrame(summary).to_csv(summary_path, index=False,
                                 float_format="%.6f")
    written.append(summary_path)
    for path in written:
        print(f"Wrote {path}")
    return written

