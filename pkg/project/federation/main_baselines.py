"""
MLaaS federation engine.

Baseline selectors and the brute-force upper bound.

Created by Matua Doc.
Created on 2026-10-19.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from main_agent import SacAgent
from main_ensemble import EnsembleConfig, all_pathways
from main_environment import check_action, FederationEnv, run_test_episode
from main_evaluation import dataset_ap, evaluate_dataset
from main_model import ActionSpaceTooLarge
from main_utils import action_from_index, format_action, write_json

logger = logging.getLogger(__name__)

# Largest N the oracle will enumerate 2^N - 1 actions for.
DEFAULT_ORACLE_CAP = 16


@dataclass
class BaselineReport:
    """One row of the method comparison table."""

    method: str
    map: float
    ap50: float
    ap75: float
    episode_cost: float
    selection_counts: list[int]
    mean_reward: float
    mean_latency: float = 0.0
    image_ids: list[str] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    per_category_ap50: dict[str, float] = field(default_factory=dict)

    def row(self, provider_names: list[str]) -> dict[str, object]:
        """Return the summary as a flat table row."""
        entry: dict[str, object] = {
            "method": self.method, "map": self.map, "ap50": self.ap50,
            "ap75": self.ap75, "episode_cost": self.episode_cost,
            "mean_reward": self.mean_reward,
            "mean_latency": self.mean_latency}
        for name, count in zip(provider_names, self.selection_counts):
            entry[f"count_{name}"] = count
        return entry

    def per_image(self) -> list[dict[str, object]]:
        """Return the action, accuracy and cost chosen for each image."""
        return [{"image_id": image_id, "action": format_action(action),
                 "accuracy": accuracy, "cost": cost}
                for image_id, action, accuracy, cost
                in zip(self.image_ids, self.actions, self.accuracies,
                       self.costs)]

    def per_category(self) -> list[dict[str, object]]:
        """Return one row per category with its AP50."""
        return [{"method": self.method, "category": category, "ap50": ap50}
                for category, ap50 in self.per_category_ap50.items()]


def run_policy(env: FederationEnv, method: str,
               policy: Callable[[int, np.ndarray], np.ndarray]
               ) -> BaselineReport:
    """Run a policy over the trace in order and report its metrics."""
    summary = run_test_episode(env, policy)
    gt = env.evaluation_ground_truth()
    metrics = evaluate_dataset(summary.predictions, gt)
    by_group = dataset_ap(summary.predictions, gt, 0.5).per_category
    per_category = {env.table.category_name(group): ap50
                    for group, ap50 in by_group.items()}
    logger.info("%s: AP50 %.4f, mAP %.4f, cost %.3f", method, metrics.ap50,
                metrics.map, summary.episode_cost)
    return BaselineReport(method, metrics.map, metrics.ap50, metrics.ap75,
                          summary.episode_cost,
                          summary.selection_counts.tolist(),
                          summary.mean_reward, summary.mean_latency,
                          summary.image_ids, summary.actions,
                          summary.accuracies, summary.costs, per_category)


def random_one(env: FederationEnv, seed: int = 0) -> BaselineReport:
    """Pick exactly one provider uniformly at random for each image."""
    rng = np.random.default_rng(seed)
    n = env.n_providers

    def policy(index: int, state: np.ndarray) -> np.ndarray:
        """Select one random provider."""
        action = np.zeros(n, dtype=np.int64)
        action[int(rng.integers(n))] = 1
        return action

    return run_policy(env, "Random-1", policy)


def random_subset(env: FederationEnv, seed: int = 0) -> BaselineReport:
    """Pick a uniformly random non-empty subset of providers per image."""
    rng = np.random.default_rng(seed)
    n = env.n_providers

    def policy(index: int, state: np.ndarray) -> np.ndarray:
        """Redraw coin flips until at least one provider is selected."""
        action = rng.integers(0, 2, size=n)
        while not action.any():
            action = rng.integers(0, 2, size=n)
        return action

    return run_policy(env, "Random-N", policy)


def ensemble_all(env: FederationEnv) -> BaselineReport:
    """Query every provider for every image."""
    action = np.ones(env.n_providers, dtype=np.int64)
    return run_policy(env, "Ensemble-N", lambda index, state: action)


def provider_report(env: FederationEnv, provider: int) -> BaselineReport:
    """Query a single fixed provider for every image."""
    if not 0 <= provider < env.n_providers:
        raise ValueError(f"Provider {provider} is out of range")
    action = np.zeros(env.n_providers, dtype=np.int64)
    action[provider] = 1
    name = env.trace.header.provider_names[provider]
    return run_policy(env, f"Provider {name}",
                      lambda index, state: action)


def combination_report(env: FederationEnv,
                       action: np.ndarray) -> BaselineReport:
    """Query one fixed combination of providers for every image."""
    action = check_action(action, env.n_providers)
    return run_policy(env, f"Combination {format_action(action)}",
                      lambda index, state: action)


def agent_report(env: FederationEnv, agent: SacAgent,
                 method: str = "Agent") -> BaselineReport:
    """Run the agent's deterministic policy as a comparison row."""
    return run_policy(env, method,
                      lambda index, state: agent.select_action(state))


def best_action(env: FederationEnv, index: int,
                prefer_cheap: bool = False) -> np.ndarray:
    """
    Return the action with the best per-image AP50 for one record.

    Actions are enumerated in ascending binary order and a later action
    replaces the best one on v >= v_max, so the last maximizer wins. With
    prefer_cheap, the cheapest maximizer wins instead (ties: the first
    enumerated).
    """
    n = env.n_providers
    best = action_from_index(1, n)
    best_value = -1.0
    best_cost = float("inf")
    for code in range(1, 2 ** n):
        action = action_from_index(code, n)
        outcome = env.evaluate_action(index, action)
        if prefer_cheap:
            better = (outcome.accuracy > best_value
                      or (outcome.accuracy == best_value
                          and outcome.cost < best_cost))
        else:
            better = outcome.accuracy >= best_value
        if better:
            best, best_value, best_cost = (action, outcome.accuracy,
                                           outcome.cost)
    return best


def brute_force_oracle(env: FederationEnv, prefer_cheap: bool = False,
                       max_providers: int = DEFAULT_ORACLE_CAP
                       ) -> BaselineReport:
    """
    Search every non-empty action for every image.

    Raises ActionSpaceTooLarge when N exceeds max_providers.
    """
    if env.n_providers > max_providers:
        raise ActionSpaceTooLarge(
            f"{env.n_providers} providers means {2 ** env.n_providers - 1} "
            f"actions per image; the cap is {max_providers} providers")

    best = [best_action(env, index, prefer_cheap)
            for index in range(len(env.trace))]
    method = "Upper Bound (cheapest)" if prefer_cheap else "Upper Bound"
    return run_policy(env, method, lambda index, state: best[index])


@dataclass
class PathwayResult:
    """Ensemble-N metrics under one voting x ablation pathway."""

    pathway: str
    map: float
    ap50: float
    ap75: float


def compare_pathways(env_factory: Callable[[EnsembleConfig],
                                           FederationEnv],
                     base: EnsembleConfig = EnsembleConfig()
                     ) -> list[PathwayResult]:
    """Evaluate Ensemble-N under each of the 12 pathways."""
    results = []
    for config in all_pathways(base):
        report = ensemble_all(env_factory(config))
        results.append(PathwayResult(str(config), report.map, report.ap50,
                                     report.ap75))
    return results


def save_reports(reports: list[BaselineReport], provider_names: list[str],
                 out_dir: Path, stem: str = "report") -> Path:
    """
    Write the comparison CSV, the per-category AP50 CSV and a per-image
    JSON dump per method.

    Returns the path of the CSV.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    frame = pd.DataFrame([report.row(provider_names) for report in reports])
    frame.to_csv(csv_path, index=False, float_format="%.6f")

    write_json(out_dir / f"{stem}_per_image.json",
               {report.method: report.per_image() for report in reports})
    rows = [row for report in reports for row in report.per_category()]
    categories = pd.DataFrame(rows, columns=["method", "category", "ap50"])
    categories.to_csv(out_dir / f"{stem}_per_category.csv", index=False,
                      float_format="%.6f")
    return csv_path
