"""
MLaaS federation engine.

Trace-driven environment: traces, rewards, costs and synthetic providers.

Created by Matua Doc.
Created on 2026-10-19.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

import numpy as np

from main_ensemble import (AblationMethod, EnsembleConfig, VotingMethod,
                           ensemble)
from main_evaluation import GroundTruth, per_image_ap50
from main_grouping import GroupingTable, normalize_all
from main_model import (AllZeroAction, BBox, BoxFormat, Coordinates,
                        EmptyTrace, EpisodeFinished, GroundTruthObject,
                        IdMismatch, ImagePrediction, InvalidAction,
                        MissingGroundTruth, RawDetection, TraceFormatError)
from main_utils import iter_json_lines, read_json, write_json_lines

logger = logging.getLogger(__name__)

# Reward when the selected providers return nothing for a non-empty image.
EMPTY_RESPONSE_REWARD = -1.0


@dataclass(frozen=True)
class LabelledBox:
    """A ground-truth object as written in a trace, before grouping."""

    label: str
    box: BBox


@dataclass
class TraceHeader:
    """The first line of a trace file."""

    provider_names: list[str]
    feature_dim: int
    coordinates: Coordinates = Coordinates.PIXEL

    @property
    def n_providers(self) -> int:
        """The number of providers, N."""
        return len(self.provider_names)

    def to_json(self) -> dict[str, Any]:
        """Return the header as a JSON object."""
        return {"N": self.n_providers,
                "provider_names": self.provider_names,
                "feature_dim": self.feature_dim,
                "coordinates": self.coordinates.value}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "TraceHeader":
        """Parse a header line."""
        try:
            names = list(data["provider_names"])
            header = cls(names, int(data["feature_dim"]),
                         Coordinates(data.get("coordinates", "pixel")))
        except (KeyError, ValueError, TypeError) as error:
            raise TraceFormatError(f"Bad trace header: {error}")
        if int(data.get("N", len(names))) != len(names):
            raise TraceFormatError("Header N does not match provider names")
        return header


@dataclass
class TraceRecord:
    """One image: its state features, provider outputs and ground truth."""

    image_id: str
    features: np.ndarray
    per_provider: list[list[RawDetection]]
    gt: list[LabelledBox] | None = None

    def to_json(self) -> dict[str, Any]:
        """Return the record as a JSON object."""
        data: dict[str, Any] = {
            "image_id": self.image_id,
            "features": [float(value) for value in self.features],
            "providers": [[{"label": raw.label, "score": raw.score,
                            "box": raw.box.to_list()} for raw in raws]
                          for raws in self.per_provider]}
        if self.gt is not None:
            data["gt"] = [{"category": truth.label,
                           "box": truth.box.to_list()} for truth in self.gt]
        return data

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "TraceRecord":
        """Parse a record line."""
        try:
            per_provider = [[RawDetection(item["label"], float(item["score"]),
                                          BBox.from_list(item["box"]))
                             for item in raws]
                            for raws in data["providers"]]
            gt = None
            if data.get("gt") is not None:
                gt = [LabelledBox(item["category"],
                                  BBox.from_list(item["box"]))
                      for item in data["gt"]]
            features = np.asarray(data["features"], dtype=np.float64)
            return cls(str(data["image_id"]), features, per_provider, gt)
        except (KeyError, ValueError, TypeError) as error:
            raise TraceFormatError(f"Bad trace record: {error}")


@dataclass
class Trace:
    """A header plus one record per image."""

    header: TraceHeader
    records: list[TraceRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        """Check every record against the header."""
        for record in self.records:
            self._check(record)

    def __len__(self) -> int:
        """Return the number of records."""
        return len(self.records)

    def _check(self, record: TraceRecord) -> None:
        """Raise if a record disagrees with the header."""
        if len(record.features) != self.header.feature_dim:
            raise TraceFormatError(
                f"{record.image_id}: {len(record.features)} features, "
                f"header says {self.header.feature_dim}")
        if len(record.per_provider) != self.header.n_providers:
            raise TraceFormatError(
                f"{record.image_id}: {len(record.per_provider)} providers, "
                f"header says {self.header.n_providers}")

    @property
    def n_providers(self) -> int:
        """The number of providers, N."""
        return self.header.n_providers

    @property
    def has_ground_truth(self) -> bool:
        """Whether every record carries ground truth."""
        return all(record.gt is not None for record in self.records)

    def save(self, path: Path) -> None:
        """Write the trace as JSON lines, header first."""
        lines = [self.header.to_json()]
        lines.extend(record.to_json() for record in self.records)
        write_json_lines(path, lines)

    @classmethod
    def load(cls, path: Path) -> "Trace":
        """Read a trace file."""
        lines = iter_json_lines(path)
        try:
            header = TraceHeader.from_json(next(lines))
        except StopIteration:
            raise EmptyTrace(f"{path} has no header")
        records = [TraceRecord.from_json(line) for line in lines]
        logger.info("Loaded %d records for %d providers from %s",
                    len(records), header.n_providers, path)
        return cls(header, records)

    def ground_truth_labels(self) -> list[str]:
        """Return every distinct ground-truth label, sorted."""
        labels = set()
        for record in self.records:
            for truth in record.gt or []:
                labels.add(truth.label)
        return sorted(labels)


@dataclass
class ProviderCostModel:
    """What each provider charges per request, in units of 10^-3 USD."""

    unit_costs: list[float]
    overrides: dict[int, list[float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Check that no cost is negative."""
        for costs in [self.unit_costs, *self.overrides.values()]:
            if any(cost < 0 for cost in costs):
                raise ValueError("Provider costs cannot be negative")

    @classmethod
    def uniform(cls, n_providers: int,
                unit_cost: float = 1.0) -> "ProviderCostModel":
        """Return a model where every provider costs the same."""
        return cls([unit_cost] * n_providers)

    def cost(self, action: np.ndarray, step: int = 0) -> float:
        """Return the cost c_t of requesting the selected providers."""
        costs = self.overrides.get(step, self.unit_costs)
        return float(np.dot(np.asarray(costs, dtype=np.float64), action))


def federated_latency(transmission: list[float],
                      inference: list[float]) -> float:
    """
    Return the latency of querying several providers for one input.

    Uploads go out one after another on the same route, so transmission
    times add up; the providers infer in parallel, so only the slowest
    inference counts.
    """
    if any(time < 0 for time in [*transmission, *inference]):
        raise ValueError("Latencies cannot be negative")
    return float(sum(transmission)) + float(max(inference, default=0.0))


@dataclass
class ProviderLatencyModel:
    """Per-provider transmission and inference seconds."""

    transmission: list[float]
    inference: list[float]

    @classmethod
    def zero(cls, n_providers: int) -> "ProviderLatencyModel":
        """Return a model with no latency at all."""
        return cls([0.0] * n_providers, [0.0] * n_providers)

    def latency(self, action: np.ndarray) -> float:
        """Return the federated latency of an action."""
        chosen = np.flatnonzero(action)
        return federated_latency([self.transmission[i] for i in chosen],
                                 [self.inference[i] for i in chosen])


class RewardMode(Enum):
    """Where the reward's accuracy reference comes from."""

    WITH_GT = "with_gt"
    WITHOUT_GT = "without_gt"

    def __str__(self) -> str:
        """Return the mode in human-readable form."""
        match self:
            case RewardMode.WITH_GT: return "with ground truth"
            case RewardMode.WITHOUT_GT: return "pseudo ground truth"


@dataclass(frozen=True)
class RewardConfig:
    """The reward r = v + beta * c and its accuracy reference."""

    beta: float = 0.0
    mode: RewardMode = RewardMode.WITH_GT
    pseudo_gt_score_floor: float = 0.0

    def __post_init__(self) -> None:
        """Check that beta is a finite non-positive number."""
        if not np.isfinite(self.beta) or self.beta > 0:
            raise ValueError(f"beta must be finite and <= 0, "
                             f"got {self.beta}")


@dataclass
class StepOutcome:
    """What one step of the environment produced."""

    reward: float
    accuracy: float
    cost: float
    next_state: np.ndarray
    done: int
    action: np.ndarray
    prediction: ImagePrediction
    latency: float = 0.0
    image_id: str = ""


def check_action(action: np.ndarray, n_providers: int) -> np.ndarray:
    """
    Return an action as an integer array after validating it.

    Raises InvalidAction for a wrong length or non-binary entries and
    AllZeroAction when no provider is selected.
    """
    action = np.asarray(action)
    if action.shape != (n_providers,):
        raise InvalidAction(f"Action has shape {action.shape}, expected "
                            f"({n_providers},)")
    if not np.isin(action, (0, 1)).all():
        raise InvalidAction(f"Action {action.tolist()} is not binary")
    if not action.any():
        raise AllZeroAction("An action must select at least one provider")
    return action.astype(np.int64)


class FederationEnv:
    """
    Serve image states and score provider selections against a trace.

    Provider outputs and ground truth are normalized through the grouping
    table once, when the environment is created.
    """

    def __init__(self,
                 trace: Trace,
                 table: GroupingTable,
                 ensemble_config: EnsembleConfig = EnsembleConfig(),
                 reward_config: RewardConfig = RewardConfig(),
                 cost_model: ProviderCostModel | None = None,
                 latency_model: ProviderLatencyModel | None = None,
                 seed: int | None = None) -> None:
        """Create the environment over an immutable trace."""
        if len(trace) == 0:
            raise EmptyTrace("The trace has no records")
        if trace.n_providers < 1:
            raise ValueError("The trace has no providers")

        self._trace = trace
        self._table = table
        self._ensemble_config = ensemble_config
        self._reward_config = reward_config
        n = trace.n_providers
        self._cost_model = cost_model or ProviderCostModel.uniform(n)
        self._latency_model = latency_model or ProviderLatencyModel.zero(n)
        self._rng = np.random.default_rng(seed)

        # Normalize every provider list and ground truth up front.
        self._predictions = [[normalize_all(raws, table)
                              for raws in record.per_provider]
                             for record in trace.records]
        self._truth = [self._group_truth(record) for record in trace.records]
        self._pseudo_truth: dict[int, list[GroundTruthObject]] = {}

        self._order = np.arange(len(trace))
        self._position = 0
        self._episode_open = False
        self._cost_total = 0.0
        self._selection_counts = np.zeros(n, dtype=np.int64)

    def _group_truth(self,
                     record: TraceRecord) -> list[GroundTruthObject] | None:
        """Map a record's ground-truth labels onto groups."""
        if record.gt is None:
            return None
        objects = []
        for truth in record.gt:
            group = self._table.group_of(truth.label)
            if group is None:
                logger.debug("%s: ground truth label '%s' has no group",
                             record.image_id, truth.label)
                continue
            objects.append(GroundTruthObject(group, truth.box))
        return objects

    @property
    def trace(self) -> Trace:
        """The trace being replayed."""
        return self._trace

    @property
    def table(self) -> GroupingTable:
        """The label grouping applied to every provider."""
        return self._table

    @property
    def n_providers(self) -> int:
        """The number of providers, N."""
        return self._trace.n_providers

    @property
    def feature_dim(self) -> int:
        """The length of a state vector."""
        return self._trace.header.feature_dim

    @property
    def ensemble_config(self) -> EnsembleConfig:
        """The ensemble pathway used for every action."""
        return self._ensemble_config

    @property
    def reward_config(self) -> RewardConfig:
        """The reward settings."""
        return self._reward_config

    @property
    def cost_model(self) -> ProviderCostModel:
        """The provider prices."""
        return self._cost_model

    @property
    def steps_taken(self) -> int:
        """Steps taken in the current episode."""
        return self._position

    @property
    def episode_cost(self) -> float:
        """The mean cost per step of the current episode, c_e."""
        if self._position == 0:
            return 0.0
        return self._cost_total / self._position

    @property
    def selection_counts(self) -> np.ndarray:
        """How many times each provider was selected this episode."""
        return self._selection_counts.copy()

    def reset(self, seed: int | None = None, shuffle: bool = False
              ) -> np.ndarray:
        """
        Start an episode and return the first state.

        With shuffle on, the order is a permutation drawn from seed (or
        from the environment's own generator when seed is None).
        """
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        if shuffle:
            self._order = self._rng.permutation(len(self._trace))
        else:
            self._order = np.arange(len(self._trace))

        self._position = 0
        self._episode_open = True
        self._cost_total = 0.0
        self._selection_counts[:] = 0
        return self.state_of(int(self._order[0]))

    def state_of(self, index: int) -> np.ndarray:
        """Return the feature vector of a record."""
        return self._trace.records[index].features

    def prediction_of(self, index: int, provider: int) -> ImagePrediction:
        """Return one provider's normalized prediction for a record."""
        return self._predictions[index][provider]

    def pseudo_ground_truth(self, index: int) -> list[GroundTruthObject]:
        """
        Return the all-provider Affirmative-WBF ensemble as ground truth.

        Scores are dropped; the result depends only on the record and is
        cached.
        """
        cached = self._pseudo_truth.get(index)
        if cached is not None:
            return cached

        config = EnsembleConfig(VotingMethod.AFFIRMATIVE, AblationMethod.WBF,
                                self._ensemble_config.match_iou)
        fused = ensemble(self._predictions[index], config)
        floor = self._reward_config.pseudo_gt_score_floor
        truth = [GroundTruthObject(detection.group, detection.box)
                 for detection in fused.detections
                 if detection.score >= floor]
        self._pseudo_truth[index] = truth
        return truth

    def true_ground_truth(self, index: int) -> list[GroundTruthObject]:
        """Return a record's labelled ground truth."""
        truth = self._truth[index]
        if truth is None:
            image_id = self._trace.records[index].image_id
            raise MissingGroundTruth(f"{image_id} has no ground truth")
        return truth

    def reference_truth(self, index: int) -> list[GroundTruthObject]:
        """Return the ground truth the reward is measured against."""
        if self._reward_config.mode is RewardMode.WITH_GT:
            return self.true_ground_truth(index)
        return self.pseudo_ground_truth(index)

    def evaluation_truth(self, index: int) -> list[GroundTruthObject]:
        """Return true ground truth when present, else the pseudo one."""
        if self._truth[index] is not None:
            return self._truth[index]
        return self.pseudo_ground_truth(index)

    def evaluation_ground_truth(self) -> GroundTruth:
        """Return the evaluation ground truth of every image."""
        return {record.image_id: self.evaluation_truth(index)
                for index, record in enumerate(self._trace.records)}

    def ensemble_action(self, index: int,
                        action: np.ndarray) -> ImagePrediction:
        """Ensemble the predictions of the selected providers."""
        chosen = np.flatnonzero(action)
        per_provider = [self._predictions[index][i] for i in chosen]
        return ensemble(per_provider, self._ensemble_config)

    def evaluate_action(self, index: int, action: np.ndarray,
                        step: int = 0) -> StepOutcome:
        """
        Score an action on a record without moving the episode.

        The reward is v + beta * c, or -1 when every selected provider
        returned nothing while the reference has objects.
        """
        action = check_action(action, self.n_providers)
        prediction = self.ensemble_action(index, action)
        reference = self.reference_truth(index)

        accuracy = per_image_ap50(prediction, reference)
        cost = self._cost_model.cost(action, step)
        nothing_back = all(self._predictions[index][i].is_empty
                           for i in np.flatnonzero(action))
        if nothing_back and reference:
            reward = EMPTY_RESPONSE_REWARD
        else:
            reward = accuracy + self._reward_config.beta * cost

        return StepOutcome(reward, accuracy, cost, self.state_of(index), 0,
                           action, prediction,
                           self._latency_model.latency(action),
                           self._trace.records[index].image_id)

    def step(self, action: np.ndarray) -> StepOutcome:
        """Execute an action on the current record and advance."""
        if not self._episode_open:
            raise EpisodeFinished("Call reset() before step()")

        index = int(self._order[self._position])
        outcome = self.evaluate_action(index, action, self._position)

        self._cost_total += outcome.cost
        self._selection_counts += outcome.action
        self._position += 1

        if self._position == len(self._trace):
            self._episode_open = False
            outcome.done = 1
        else:
            outcome.next_state = self.state_of(
                int(self._order[self._position]))
        return outcome

    def get_state(self) -> dict[str, Any]:
        """Return the episode position and generator state."""
        return {"rng": self._rng.bit_generator.state,
                "order": self._order.tolist(),
                "position": self._position,
                "episode_open": self._episode_open,
                "cost_total": self._cost_total,
                "selection_counts": self._selection_counts.tolist()}

    def set_state(self, state: dict[str, Any]) -> None:
        """Restore a state returned by get_state()."""
        self._rng.bit_generator.state = state["rng"]
        self._order = np.asarray(state["order"], dtype=np.int64)
        self._position = int(state["position"])
        self._episode_open = bool(state["episode_open"])
        self._cost_total = float(state["cost_total"])
        self._selection_counts = np.asarray(state["selection_counts"],
                                            dtype=np.int64)


def compile_trace(provider_dumps: dict[str, dict[str, list[dict]]],
                  features: dict[str, list[float]],
                  gt: dict[str, list[dict]] | None = None,
                  box_format: BoxFormat = BoxFormat.XYXY,
                  coordinates: Coordinates = Coordinates.PIXEL) -> Trace:
    """
    Compile raw provider responses and features into a trace.

    Parameters:
    - provider_dumps (dict): provider name -> image id -> detections, each
      {label, score, box}.
    - features (dict): image id -> feature vector.
    - gt (dict): optional image id -> [{category, box}].

    Records are sorted by image id. Raises IdMismatch listing every id
    missing from some input.
    """
    id_sets = [set(features)] + [set(dump) for dump in
                                 provider_dumps.values()]
    if gt is not None:
        id_sets.append(set(gt))
    every_id = set().union(*id_sets)
    shared_ids = set(every_id).intersection(*id_sets)
    if shared_ids != every_id:
        offending = sorted(every_id - shared_ids)
        raise IdMismatch(f"Image ids do not align: {offending}")

    names = list(provider_dumps)
    dims = {len(vector) for vector in features.values()}
    if len(dims) > 1:
        raise TraceFormatError(f"Feature vectors differ in length: {dims}")
    header = TraceHeader(names, dims.pop() if dims else 0, coordinates)

    records = []
    for image_id in sorted(every_id):
        per_provider = [[RawDetection(item["label"], float(item["score"]),
                                      BBox.from_list(item["box"], box_format))
                         for item in provider_dumps[name][image_id]]
                        for name in names]
        truth = None
        if gt is not None:
            truth = [LabelledBox(item["category"],
                                 BBox.from_list(item["box"], box_format))
                     for item in gt[image_id]]
        vector = np.asarray(features[image_id], dtype=np.float64)
        records.append(TraceRecord(image_id, vector, per_provider, truth))

    return Trace(header, records)


def load_provider_dump(path: Path) -> dict[str, list[dict]]:
    """Load one provider's responses, keyed by image id."""
    dump = read_json(path)
    if not isinstance(dump, dict):
        raise TraceFormatError(f"{path} is not keyed by image id")
    return dump


@dataclass(frozen=True)
class SyntheticProviderParams:
    """
    How a synthetic provider perturbs its source objects.

    recall is either one probability for every category or a mapping
    from category label to probability; labels missing from the mapping
    use unlisted_recall.
    """

    recall: float | dict[str, float] = 0.5
    jitter: float = 0.0
    score_mean: float = 1.0
    score_noise: float = 0.0
    fp_rate: float = 0.0
    fp_score_max: float = 0.5
    base_provider: int | None = None
    shared_difficulty: bool = True
    unlisted_recall: float = 0.0

    def __post_init__(self) -> None:
        """Check the probability and scale parameters."""
        recalls = (list(self.recall.values())
                   if isinstance(self.recall, dict) else [self.recall])
        for value in [*recalls, self.unlisted_recall]:
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"recall {value} is outside [0, 1]")
        if min(self.jitter, self.score_noise, self.fp_rate) < 0.0:
            raise ValueError("jitter, score_noise and fp_rate must be >= 0")

    def recall_for(self, label: str) -> float:
        """Return the probability of reporting an object of one label."""
        if isinstance(self.recall, dict):
            return self.recall.get(label, self.unlisted_recall)
        return self.recall


def _image_extent(record: TraceRecord, coordinates: Coordinates
                  ) -> tuple[float, float]:
    """Return the width and height boxes in a record can span."""
    if coordinates is Coordinates.NORMALIZED:
        return 1.0, 1.0
    boxes = [truth.box for truth in record.gt or []]
    boxes += [raw.box for raws in record.per_provider for raw in raws]
    if not boxes:
        return 640.0, 480.0
    return (max(box.x_max for box in boxes),
            max(box.y_max for box in boxes))


def _jitter_box(box: BBox, jitter: float, extent: tuple[float, float],
                rng: np.random.Generator) -> BBox:
    """Move each corner by Gaussian noise scaled to the box size."""
    width = box.x_max - box.x_min
    height = box.y_max - box.y_min
    noise = rng.normal(0.0, 1.0, size=4) * jitter
    xs = sorted([box.x_min + noise[0] * width, box.x_max + noise[2] * width])
    ys = sorted([box.y_min + noise[1] * height,
                 box.y_max + noise[3] * height])
    xs = [float(np.clip(x, 0.0, extent[0])) for x in xs]
    ys = [float(np.clip(y, 0.0, extent[1])) for y in ys]
    return BBox(xs[0], ys[0], xs[1], ys[1])


def _synthesize_one(record: TraceRecord, params: SyntheticProviderParams,
                    vocabulary: list[str], coordinates: Coordinates,
                    difficulty: np.ndarray | None,
                    rng: np.random.Generator) -> list[RawDetection]:
    """Generate one synthetic provider's detections for one record."""
    if params.base_provider is None:
        if record.gt is None:
            raise MissingGroundTruth(f"{record.image_id} has no ground "
                                     f"truth to perturb")
        sources = [(truth.label, truth.box) for truth in record.gt]
    else:
        sources = [(raw.label, raw.box)
                   for raw in record.per_provider[params.base_provider]]

    extent = _image_extent(record, coordinates)
    detections = []
    for number, (label, box) in enumerate(sources):
        draw = rng.random()
        if difficulty is not None and number < len(difficulty):
            draw = difficulty[number]
        found = draw < params.recall_for(label)
        new_box = _jitter_box(box, params.jitter, extent, rng)
        score = params.score_mean + rng.normal(0.0, 1.0) * params.score_noise
        if found:
            score = float(np.clip(score, 0.01, 1.0))
            detections.append(RawDetection(label, score, new_box))

    # False positives land anywhere in the image with a low-ish score.
    for _ in range(rng.poisson(params.fp_rate)):
        if not vocabulary:
            break
        label = vocabulary[int(rng.integers(len(vocabulary)))]
        width = extent[0] * rng.uniform(0.05, 0.5)
        height = extent[1] * rng.uniform(0.05, 0.5)
        x = rng.uniform(0.0, extent[0] - width)
        y = rng.uniform(0.0, extent[1] - height)
        score = float(rng.uniform(0.01, max(0.01, params.fp_score_max)))
        detections.append(RawDetection(label, score,
                                       BBox(x, y, x + width, y + height)))
    return detections


def synthesize_providers(trace: Trace, k: int,
                         params: SyntheticProviderParams
                         | list[SyntheticProviderParams],
                         seed: int = 0,
                         names: list[str] | None = None) -> Trace:
    """
    Return a copy of a trace with k synthetic providers appended.

    Each synthetic provider keeps each source object (ground truth, or a
    base provider's detections) with probability recall, jitters its
    corners, draws a noisy score and adds Poisson false positives. With
    shared_difficulty, an object's detection draw is shared by every
    synthetic provider, so weak providers miss the objects strong ones
    miss too.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if isinstance(params, SyntheticProviderParams):
        params = [params] * k
    if len(params) != k:
        raise ValueError(f"Expected {k} parameter sets, got {len(params)}")

    first = trace.n_providers
    names = names or [f"synthetic-{first + i}" for i in range(k)]
    vocabulary = trace.ground_truth_labels()
    coordinates = trace.header.coordinates

    sequence = np.random.SeedSequence(seed)
    difficulty_rng = np.random.default_rng(sequence.spawn(1)[0])
    provider_rngs = [np.random.default_rng(child)
                     for child in sequence.spawn(k)]

    records = []
    for record in trace.records:
        n_objects = len(record.gt or [])
        difficulty = difficulty_rng.random(n_objects)
        added = []
        for number in range(k):
            shared = difficulty if params[number].shared_difficulty else None
            added.append(_synthesize_one(record, params[number], vocabulary,
                                         coordinates, shared,
                                         provider_rngs[number]))
        records.append(TraceRecord(record.image_id, record.features,
                                   record.per_provider + added, record.gt))

    header = TraceHeader(trace.header.provider_names + names,
                         trace.header.feature_dim, coordinates)
    logger.info("Added %d synthetic providers to %d records",
                k, len(records))
    return Trace(header, records)


def graded_provider_params(k: int, low: float = 0.26, high: float = 0.535,
                           jitter: float = 0.03,
                           fp_rate: float = 0.8
                           ) -> list[SyntheticProviderParams]:
    """
    Return k providers whose recall climbs evenly from low to high.

    Weaker providers also hallucinate more, so federating all of them
    costs precision.
    """
    recalls = np.linspace(low, high, k)
    params = []
    for recall in recalls:
        strength = (recall - low) / (high - low) if high > low else 1.0
        params.append(SyntheticProviderParams(
            recall=float(recall), jitter=jitter, score_mean=0.7,
            score_noise=0.1, fp_rate=float(fp_rate * (1.0 - strength)),
            fp_score_max=0.8))
    return params


def build_ground_truth_trace(n_images: int, feature_dim: int = 8,
                             categories: list[str] | None = None,
                             max_objects: int = 4,
                             seed: int = 0) -> Trace:
    """Return a trace of random normalized ground truth and no providers."""
    categories = categories or ["person", "car", "dog"]
    rng = np.random.default_rng(seed)
    records = []
    for number in range(n_images):
        gt = []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            width, height = rng.uniform(0.1, 0.3, size=2)
            x = rng.uniform(0.0, 1.0 - width)
            y = rng.uniform(0.0, 1.0 - height)
            label = categories[int(rng.integers(len(categories)))]
            gt.append(LabelledBox(label, BBox(x, y, x + width, y + height)))
        features = rng.normal(0.0, 0.1, size=feature_dim)
        records.append(TraceRecord(f"img-{number:05d}", features, [], gt))

    header = TraceHeader([], feature_dim, Coordinates.NORMALIZED)
    return Trace(header, records)


def build_routing_trace(n_images: int, n_providers: int = 3,
                        feature_dim: int = 8, seed: int = 0) -> Trace:
    """
    Return a trace where feature 0 says which provider is accurate.

    For each image one provider, chosen at random, reproduces the ground
    truth exactly. The others each report an object only 30% of the time,
    with small box noise and a lower score. Feature 0 holds the accurate
    provider's index, centred on zero.
    """
    base = build_ground_truth_trace(n_images, feature_dim, seed=seed)
    rng = np.random.default_rng([seed, 1])
    centre = (n_providers - 1) / 2
    records = []
    for record in base.records:
        accurate = int(rng.integers(n_providers))
        features = record.features.copy()
        features[0] = accurate - centre
        per_provider = []
        for provider in range(n_providers):
            if provider == accurate:
                per_provider.append([RawDetection(truth.label, 0.9,
                                                  truth.box)
                                     for truth in record.gt or []])
                continue
            detections = []
            for truth in record.gt or []:
                if rng.random() < 0.3:
                    box = _jitter_box(truth.box, 0.02, (1.0, 1.0), rng)
                    detections.append(RawDetection(truth.label, 0.6, box))
            per_provider.append(detections)
        records.append(TraceRecord(record.image_id, features, per_provider,
                                   record.gt))

    names = [f"provider-{i}" for i in range(n_providers)]
    return Trace(TraceHeader(names, feature_dim, Coordinates.NORMALIZED),
                 records)


@dataclass
class EpisodeSummary:
    """Everything a single pass over the trace produced."""

    image_ids: list[str]
    actions: list[np.ndarray]
    accuracies: list[float]
    rewards: list[float]
    costs: list[float]
    latencies: list[float]
    predictions: dict[str, ImagePrediction]
    episode_cost: float
    selection_counts: np.ndarray

    @property
    def mean_reward(self) -> float:
        """The average reward per image."""
        return float(np.mean(self.rewards))

    @property
    def mean_accuracy(self) -> float:
        """The average per-image AP50."""
        return float(np.mean(self.accuracies))

    @property
    def mean_latency(self) -> float:
        """The average federated latency per image."""
        return float(np.mean(self.latencies))


def run_test_episode(env: FederationEnv,
                     policy: Callable[[int, np.ndarray], np.ndarray]
                     ) -> EpisodeSummary:
    """
    Replay the trace in order, choosing each action with a policy.

    The policy is called with the record index and its state. The
    environment's episode position is restored afterwards, so a test
    episode can run in the middle of training.
    """
    saved = env.get_state()
    state = env.reset(shuffle=False)
    summary = EpisodeSummary([], [], [], [], [], [], {}, 0.0,
                             np.zeros(env.n_providers, dtype=np.int64))

    for index in range(len(env.trace)):
        outcome = env.step(policy(index, state))
        summary.image_ids.append(outcome.image_id)
        summary.actions.append(outcome.action)
        summary.accuracies.append(outcome.accuracy)
        summary.rewards.append(outcome.reward)
        summary.costs.append(outcome.cost)
        summary.latencies.append(outcome.latency)
        summary.predictions[outcome.image_id] = outcome.prediction
        state = outcome.next_state

    summary.episode_cost = env.episode_cost
    summary.selection_counts = env.selection_counts
    env.set_state(saved)
    return summary
