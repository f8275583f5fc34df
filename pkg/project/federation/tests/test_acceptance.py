"""
MLaaS federation engine.

End-to-end training runs. These take minutes; run them with
`pytest -m slow`.

Created by Matua Doc.
Created on 2026-10-19.
"""

import numpy as np
import pytest

from main_agent import SacHyperparams, train, TrainingSeeds
from main_baselines import (agent_report, brute_force_oracle, ensemble_all,
                            provider_report, random_subset)
from main_environment import (build_ground_truth_trace, build_routing_trace,
                              FederationEnv, graded_provider_params,
                              RewardConfig, RewardMode, synthesize_providers)
from main_grouping import identity_grouping

pytestmark = pytest.mark.slow

LEARNER = SacHyperparams(lr=1e-3, alpha=0.05, batch_size=256,
                         hidden_sizes=(64, 64))

# Neighbouring graded providers differ by a few AP50 points.
GRADED_LEARNER = SacHyperparams(gamma=0.5, lr=1e-3, alpha=0.01,
                                batch_size=256, hidden_sizes=(64, 64))


def environment(trace, mode: RewardMode = RewardMode.WITH_GT,
                beta: float = -0.1) -> FederationEnv:
    """Return an environment over a trace with a cost penalty."""
    table = identity_grouping(trace.ground_truth_labels())
    return FederationEnv(trace, table,
                         reward_config=RewardConfig(beta, mode), seed=0)


@pytest.fixture(scope="module")
def routing_trace():
    """The three-provider routing scenario."""
    return build_routing_trace(2000, n_providers=3, feature_dim=8, seed=0)


@pytest.fixture(scope="module")
def routed_agent(routing_trace):
    """An agent trained on the routing scenario with true labels."""
    env = environment(routing_trace)
    result = train(env, LEARNER, TrainingSeeds(0, 0, 0), epochs=20,
                   steps_per_epoch=500)
    return env, result


class TestRouting:
    """Learning which provider to ask from the features."""

    def test_close_to_the_oracle(self, routed_agent):
        """The agent earns almost the best reward available."""
        env, result = routed_agent
        agent = agent_report(env, result.agent)
        oracle = brute_force_oracle(env, prefer_cheap=True)
        assert agent.mean_reward >= 0.95 * oracle.mean_reward

    def test_beats_random_subsets(self, routed_agent):
        """A learned choice is more accurate than guessing."""
        env, result = routed_agent
        assert agent_report(env, result.agent).ap50 > \
            random_subset(env, seed=0).ap50

    def test_cheaper_than_ensembling(self, routed_agent):
        """The agent asks far fewer providers than Ensemble-N."""
        env, result = routed_agent
        assert ensemble_all(env).episode_cost == pytest.approx(3.0)
        assert agent_report(env, result.agent).episode_cost <= 1.2

    def test_without_ground_truth(self, routing_trace, routed_agent):
        """Training on pseudo labels stays close to true labels."""
        env, result = routed_agent
        reference = agent_report(env, result.agent)
        pseudo_env = environment(routing_trace, RewardMode.WITHOUT_GT)
        pseudo = train(pseudo_env, LEARNER, TrainingSeeds(0, 0, 0),
                       epochs=20, steps_per_epoch=500)
        # Score both agents against the true labels.
        scored = agent_report(env, pseudo.agent)
        assert scored.ap50 >= 0.9 * reference.ap50
        assert scored.episode_cost <= 1.1 * reference.episode_cost
        assert scored.episode_cost >= 0.9 * reference.episode_cost


class TestScalability:
    """Ten graded providers with one dominant."""

    @pytest.fixture(scope="class")
    def graded_env(self):
        """An environment over ten synthetic providers."""
        base = build_ground_truth_trace(2000, feature_dim=8, seed=5)
        trace = synthesize_providers(base, 10, graded_provider_params(10),
                                     seed=5)
        return environment(trace)

    def test_all_providers_worse_than_the_best(self, graded_env):
        """Federating every provider loses to the dominant one."""
        dominant = max(provider_report(graded_env, provider).ap50
                       for provider in range(graded_env.n_providers))
        assert ensemble_all(graded_env).ap50 < dominant

    def test_agent_matches_the_dominant_provider(self, graded_env):
        """The agent learns to ask the strongest provider cheaply."""
        dominant = max(provider_report(graded_env, provider).ap50
                       for provider in range(graded_env.n_providers))
        result = train(graded_env, GRADED_LEARNER, TrainingSeeds(0, 0, 0),
                       epochs=40, steps_per_epoch=500)
        report = agent_report(graded_env, result.agent)
        assert report.ap50 >= dominant - 0.005
        assert report.episode_cost <= 1.2

        accuracy = np.array([row.test_ap50 for row in result.log.rows])
        for before, after in zip(accuracy[4:], accuracy[5:]):
            assert after >= 0.8 * before
        cost = np.array([row.episode_cost for row in result.log.rows])
        for before, after in zip(cost[4:], cost[5:]):
            assert after <= 1.5 * before
