"""
MLaaS federation engine.

Tests for traces, the environment and provider synthesis.

Created by Matua Doc.
Created on 2026-10-19.
"""

import numpy as np
import pytest

from conftest import box
from main_environment import (build_ground_truth_trace, compile_trace,
                              FederationEnv, federated_latency,
                              graded_provider_params, LabelledBox,
                              ProviderCostModel, ProviderLatencyModel,
                              RewardConfig, RewardMode, run_test_episode,
                              synthesize_providers, SyntheticProviderParams,
                              Trace, TraceHeader, TraceRecord)
from main_evaluation import evaluate_dataset
from main_grouping import identity_grouping
from main_model import (AllZeroAction, Coordinates, EmptyTrace,
                        EpisodeFinished, IdMismatch, InvalidAction,
                        MissingGroundTruth, RawDetection)


def make_trace(per_image: list[tuple[list[list[RawDetection]],
                                     list[LabelledBox] | None]],
               names: list[str] | None = None) -> Trace:
    """Return a trace from (per-provider detections, gt) pairs."""
    n = len(per_image[0][0])
    records = [TraceRecord(f"img-{number}", np.array([float(number), 1.0]),
                           per_provider, gt)
               for number, (per_provider, gt) in enumerate(per_image)]
    header = TraceHeader(names or [f"p{i}" for i in range(n)], 2)
    return Trace(header, records)


def make_env(trace: Trace, beta: float = 0.0,
             mode: RewardMode = RewardMode.WITH_GT, **kwargs
             ) -> FederationEnv:
    """Return an environment grouping the labels cat and dog."""
    return FederationEnv(trace, identity_grouping(["cat", "dog"]),
                         reward_config=RewardConfig(beta, mode), **kwargs)


CAT = LabelledBox("cat", box(0, 0, 10, 10))
DOG = LabelledBox("dog", box(20, 20, 30, 30))


def exact(label: str, bbox, score: float = 0.9) -> RawDetection:
    """Return a raw detection."""
    return RawDetection(label, score, bbox)


class TestReset:
    """Episode framing."""

    def test_single_record(self):
        """The first state is the only record's features."""
        env = make_env(make_trace([([[exact("cat", CAT.box)]], [CAT])]))
        np.testing.assert_array_equal(env.reset(), [0.0, 1.0])

    def test_same_seed_same_order(self):
        """Seeded shuffles repeat."""
        trace = build_ground_truth_trace(100, feature_dim=3, seed=1)
        env = FederationEnv(synthesize_providers(
            trace, 1, SyntheticProviderParams(recall=1.0)),
            identity_grouping(trace.ground_truth_labels()))
        states = []
        orders = []
        for _ in range(2):
            states.append(env.reset(seed=5, shuffle=True))
            orders.append(env.get_state()["order"])
        assert orders[0] == orders[1]
        np.testing.assert_array_equal(states[0], states[1])

    def test_different_seeds_differ(self):
        """At least one of five seed pairs gives another order."""
        trace = build_ground_truth_trace(100, feature_dim=3, seed=1)
        env = FederationEnv(synthesize_providers(
            trace, 1, SyntheticProviderParams(recall=1.0)),
            identity_grouping(trace.ground_truth_labels()))
        differ = 0
        for seed in range(5):
            env.reset(seed=seed, shuffle=True)
            first = env.get_state()["order"]
            env.reset(seed=seed + 100, shuffle=True)
            differ += first != env.get_state()["order"]
        assert differ >= 1

    def test_empty_trace(self):
        """An environment needs records."""
        with pytest.raises(EmptyTrace):
            make_env(Trace(TraceHeader(["p0"], 2), []))


class TestStep:
    """Rewards, costs and action checks."""

    def test_perfect_provider_beta_zero(self):
        """With beta 0 the reward is the accuracy."""
        env = make_env(make_trace([([[exact("cat", CAT.box)],
                                     [exact("cat", CAT.box)]], [CAT])]))
        env.reset()
        outcome = env.step(np.array([1, 1]))
        assert outcome.accuracy == 1.0
        assert outcome.reward == 1.0
        assert outcome.cost == 2.0
        assert outcome.done == 1

    def test_cost_penalty(self):
        """Half accuracy, two providers, beta -0.1 gives 0.3."""
        env = make_env(make_trace([([[exact("cat", CAT.box)],
                                     [exact("cat", CAT.box)]],
                                    [CAT, DOG])]), beta=-0.1)
        env.reset()
        outcome = env.step(np.array([1, 1]))
        assert outcome.accuracy == pytest.approx(0.5)
        assert outcome.reward == pytest.approx(0.3)

    def test_empty_response(self):
        """Paying for nothing on a non-empty image scores -1."""
        env = make_env(make_trace([([[], [exact("cat", CAT.box)]],
                                    [CAT])]))
        env.reset()
        assert env.step(np.array([1, 0])).reward == -1.0

    def test_empty_image_and_empty_response(self):
        """Correct abstention on an empty image scores 1."""
        env = make_env(make_trace([([[], []], [])]), beta=-0.1)
        env.reset()
        outcome = env.step(np.array([1, 0]))
        assert outcome.accuracy == 1.0
        assert outcome.reward == pytest.approx(0.9)

    def test_invalid_actions(self):
        """All-zero, wrong-length and non-binary actions are refused."""
        env = make_env(make_trace([([[], []], [CAT])]))
        env.reset()
        with pytest.raises(AllZeroAction):
            env.step(np.array([0, 0]))
        with pytest.raises(InvalidAction):
            env.step(np.array([1, 0, 1]))
        with pytest.raises(InvalidAction):
            env.step(np.array([2, 0]))

    def test_step_after_end(self):
        """Stepping past the last record needs a reset."""
        env = make_env(make_trace([([[exact("cat", CAT.box)]], [CAT])]))
        env.reset()
        env.step(np.array([1]))
        with pytest.raises(EpisodeFinished):
            env.step(np.array([1]))

    def test_cost_accounting(self, routing_env):
        """Episode cost is the independent mean of per-step costs."""
        costs = [1.0, 2.5, 0.5]
        env = FederationEnv(routing_env.trace,
                            identity_grouping(["person", "car", "dog"]),
                            cost_model=ProviderCostModel(costs))
        rng = np.random.default_rng(0)
        env.reset(seed=1, shuffle=True)
        total = 0.0
        for _ in range(len(env.trace)):
            action = rng.integers(0, 2, size=3)
            if not action.any():
                action[0] = 1
            outcome = env.step(action)
            assert outcome.cost == pytest.approx(float(np.dot(costs,
                                                              action)))
            total += outcome.cost
        assert env.episode_cost == pytest.approx(total / len(env.trace))

    def test_cost_overrides_by_step(self):
        """A per-step price table replaces the default prices."""
        model = ProviderCostModel([1.0, 1.0], {1: [3.0, 0.5]})
        assert model.cost(np.array([1, 1]), 0) == 2.0
        assert model.cost(np.array([1, 1]), 1) == 3.5

    def test_negative_costs_refused(self):
        """Prices cannot be negative."""
        with pytest.raises(ValueError):
            ProviderCostModel([-1.0])

    def test_deterministic(self, routing_env):
        """The same seed and actions give the same outcomes."""
        rewards = []
        for _ in range(2):
            routing_env.reset(seed=4, shuffle=True)
            rewards.append([routing_env.step(np.array([1, 0, 1])).reward
                            for _ in range(len(routing_env.trace))])
        assert rewards[0] == rewards[1]


class TestPseudoGroundTruth:
    """Rewards against the all-provider ensemble."""

    def test_single_provider(self):
        """With one provider the reference is its own output."""
        env = make_env(make_trace([([[exact("cat", CAT.box, 0.3)]], None)]),
                       mode=RewardMode.WITHOUT_GT)
        truth = env.pseudo_ground_truth(0)
        assert [(item.group, item.box) for item in truth] == [(0, CAT.box)]

    def test_agreeing_providers_fuse(self):
        """Two overlapping boxes give one fused reference box."""
        env = make_env(make_trace([([[exact("cat", box(0, 0, 10, 10), 0.8)],
                                     [exact("cat", box(1, 1, 11, 11), 0.4)]],
                                    None)]), mode=RewardMode.WITHOUT_GT)
        truth = env.pseudo_ground_truth(0)
        assert len(truth) == 1
        np.testing.assert_allclose(truth[0].box.to_list(),
                                   [1 / 3, 1 / 3, 31 / 3, 31 / 3])

    def test_all_empty(self):
        """No detections, no reference."""
        env = make_env(make_trace([([[], []], None)]),
                       mode=RewardMode.WITHOUT_GT)
        assert env.pseudo_ground_truth(0) == []

    def test_is_cached(self):
        """The reference is computed once per record."""
        env = make_env(make_trace([([[exact("cat", CAT.box)]], None)]),
                       mode=RewardMode.WITHOUT_GT)
        assert env.pseudo_ground_truth(0) is env.pseudo_ground_truth(0)

    def test_modes_agree_when_providers_emit_truth(self):
        """Providers that all report the truth make both modes equal."""
        per_image = [([[exact("cat", CAT.box), exact("dog", DOG.box)],
                       [exact("cat", CAT.box), exact("dog", DOG.box)]],
                      [CAT, DOG]),
                     ([[exact("dog", DOG.box)], [exact("dog", DOG.box)]],
                      [DOG])]
        trace = make_trace(per_image)
        with_gt = make_env(trace, beta=-0.1)
        without_gt = make_env(trace, beta=-0.1, mode=RewardMode.WITHOUT_GT)
        for action in ([1, 0], [0, 1], [1, 1]):
            for index in range(len(trace)):
                assert with_gt.evaluate_action(index, np.array(action)) \
                    .reward == pytest.approx(without_gt.evaluate_action(
                        index, np.array(action)).reward)

    def test_with_gt_needs_ground_truth(self):
        """The with_gt mode fails on records without labels."""
        env = make_env(make_trace([([[exact("cat", CAT.box)]], None)]))
        env.reset()
        with pytest.raises(MissingGroundTruth):
            env.step(np.array([1]))


class TestLatency:
    """Federated latency."""

    @pytest.mark.parametrize("transmission, inference, expected", [
        ([1, 1], [5, 7], 9.0),
        ([2], [4], 6.0),
        ([0, 0, 0], [3, 3, 3], 3.0),
        ([], [], 0.0),
    ])
    def test_sum_plus_max(self, transmission, inference, expected):
        """Uploads add up, inference overlaps."""
        assert federated_latency(transmission, inference) == expected

    def test_monotone(self):
        """Raising any time never lowers the latency."""
        rng = np.random.default_rng(0)
        for _ in range(200):
            t = list(rng.uniform(0, 5, size=3))
            q = list(rng.uniform(0, 5, size=3))
            base = federated_latency(t, q)
            which = int(rng.integers(3))
            t[which] += 1.0
            assert federated_latency(t, q) >= base
            q[which] += 1.0
            assert federated_latency(t, q) >= base

    def test_step_reports_latency(self):
        """Each outcome carries the selected providers' latency."""
        env = make_env(make_trace([([[exact("cat", CAT.box)],
                                     [exact("cat", CAT.box)]], [CAT])]),
                       latency_model=ProviderLatencyModel([1, 1], [5, 7]))
        env.reset()
        assert env.step(np.array([1, 1])).latency == 9.0


class TestTraceFiles:
    """Trace ingestion and file round trips."""

    def test_compile(self):
        """One provider, two images."""
        dumps = {"aws": {"b": [{"label": "cat", "score": 0.5,
                                "box": [0, 0, 1, 1]}],
                         "a": []}}
        trace = compile_trace(dumps, {"a": [0.0], "b": [1.0]})
        assert trace.n_providers == 1
        assert [record.image_id for record in trace.records] == ["a", "b"]

    def test_id_mismatch(self):
        """Missing ids are listed."""
        dumps = {"aws": {"a": []}}
        with pytest.raises(IdMismatch, match="'b'"):
            compile_trace(dumps, {"a": [0.0], "b": [1.0]})

    def test_save_and_load(self, tmp_path, routing_trace):
        """A saved trace reloads with the same content."""
        path = tmp_path / "trace.jsonl"
        routing_trace.save(path)
        loaded = Trace.load(path)
        assert loaded.header == routing_trace.header
        assert len(loaded) == len(routing_trace)
        first, again = routing_trace.records[0], loaded.records[0]
        np.testing.assert_array_equal(first.features, again.features)
        assert first.per_provider == again.per_provider
        assert first.gt == again.gt

    def test_header_line(self, tmp_path, routing_trace):
        """The first line names N, the providers and the features."""
        path = tmp_path / "trace.jsonl"
        routing_trace.save(path)
        header = path.read_text().splitlines()[0]
        assert header.startswith('{"N":3,"provider_names":')


class TestSynthesis:
    """Synthetic providers."""

    def test_perfect_provider(self):
        """Full recall and no noise reproduces the truth exactly."""
        base = build_ground_truth_trace(30, seed=2)
        trace = synthesize_providers(base, 1,
                                     SyntheticProviderParams(recall=1.0))
        env = FederationEnv(trace, identity_grouping(
            base.ground_truth_labels()))
        summary = run_test_episode(env, lambda index, state: np.array([1]))
        metrics = evaluate_dataset(summary.predictions,
                                   env.evaluation_ground_truth())
        assert metrics.ap50 == pytest.approx(1.0)

    def test_empty_provider(self):
        """Zero recall returns nothing."""
        base = build_ground_truth_trace(30, seed=2)
        trace = synthesize_providers(base, 1,
                                     SyntheticProviderParams(recall=0.0))
        assert all(not record.per_provider[0] for record in trace.records)

    def test_deterministic(self):
        """The same seed gives the same detections."""
        base = build_ground_truth_trace(20, seed=2)
        params = SyntheticProviderParams(recall=0.5, jitter=0.05,
                                         fp_rate=1.0)
        first = synthesize_providers(base, 2, params, seed=9)
        second = synthesize_providers(base, 2, params, seed=9)
        assert [r.per_provider for r in first.records] == \
            [r.per_provider for r in second.records]

    def test_graded_spread(self):
        """A graded sweep spreads the providers' AP50."""
        base = build_ground_truth_trace(300, seed=3)
        trace = synthesize_providers(base, 4, graded_provider_params(4),
                                     seed=3)
        env = FederationEnv(trace, identity_grouping(
            base.ground_truth_labels()))
        ap50 = []
        for provider in range(4):
            action = np.eye(4, dtype=np.int64)[provider]
            summary = run_test_episode(env, lambda index, state: action)
            ap50.append(evaluate_dataset(
                summary.predictions, env.evaluation_ground_truth()).ap50)
        assert ap50[-1] - ap50[0] > 0.1

    def test_graded_defaults_span(self):
        """Ten default providers run from about 0.21 to 0.53 AP50."""
        base = build_ground_truth_trace(1000, seed=5)
        trace = synthesize_providers(base, 10, graded_provider_params(10),
                                     seed=5)
        env = FederationEnv(trace, identity_grouping(
            base.ground_truth_labels()))
        ap50 = []
        for provider in (0, 9):
            action = np.eye(10, dtype=np.int64)[provider]
            summary = run_test_episode(env, lambda index, state: action)
            ap50.append(evaluate_dataset(
                summary.predictions, env.evaluation_ground_truth()).ap50)
        assert ap50[0] == pytest.approx(0.2076, abs=0.05)
        assert ap50[1] == pytest.approx(0.5343, abs=0.04)

    def test_recall_per_category(self):
        """A provider that only recalls people reports every person."""
        base = build_ground_truth_trace(40, seed=2)
        params = SyntheticProviderParams(recall={"person": 1.0})
        trace = synthesize_providers(base, 1, params)
        for record in trace.records:
            people = [truth.box for truth in record.gt
                      if truth.label == "person"]
            assert [raw.label for raw in record.per_provider[0]] == \
                ["person"] * len(people)
            assert [raw.box for raw in record.per_provider[0]] == people

    def test_unlisted_recall(self):
        """Labels missing from the mapping use unlisted_recall."""
        params = SyntheticProviderParams(recall={"person": 0.9},
                                         unlisted_recall=0.2)
        assert params.recall_for("person") == 0.9
        assert params.recall_for("dog") == 0.2
        assert SyntheticProviderParams(recall=0.4).recall_for("dog") == 0.4

    def test_recall_out_of_range(self):
        """Every recall in the mapping must be a probability."""
        with pytest.raises(ValueError):
            SyntheticProviderParams(recall={"person": 1.5})
        with pytest.raises(ValueError):
            SyntheticProviderParams(recall={}, unlisted_recall=-0.1)

    def test_base_provider_source(self):
        """A base provider can stand in for ground truth."""
        trace = make_trace([([[exact("cat", CAT.box)]], None)])
        extended = synthesize_providers(
            trace, 1, SyntheticProviderParams(recall=1.0, base_provider=0))
        assert extended.records[0].per_provider[1][0].box == CAT.box
        assert extended.header.provider_names[-1] == "synthetic-1"

    def test_coordinates_are_kept(self):
        """Synthesis keeps the trace's coordinate convention."""
        base = build_ground_truth_trace(5, seed=2)
        trace = synthesize_providers(base, 1, SyntheticProviderParams())
        assert trace.header.coordinates is Coordinates.NORMALIZED


class TestTestEpisode:
    """Running a policy over the trace in order."""

    def test_restores_position(self, routing_env):
        """A test episode in mid-episode leaves the position alone."""
        routing_env.reset(seed=0, shuffle=True)
        routing_env.step(np.array([1, 1, 1]))
        before = routing_env.get_state()
        summary = run_test_episode(routing_env,
                                   lambda index, state: np.array([1, 1, 1]))
        assert routing_env.get_state()["position"] == before["position"]
        assert summary.episode_cost == 3.0
        assert summary.image_ids == [record.image_id for record
                                     in routing_env.trace.records]
