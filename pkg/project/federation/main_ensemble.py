"""
MLaaS federation engine.

Ensemble part: group, vote, then ablate duplicate boxes.

Created by Matua Doc.
Created on 2026-10-19.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from main_model import (AllZeroScores, BBox, Detection, ImagePrediction,
                        iou)

logger = logging.getLogger(__name__)


class VotingMethod(Enum):
    """Rules deciding which detection groups survive."""

    AFFIRMATIVE = "affirmative"
    CONSENSUS = "consensus"
    UNANIMOUS = "unanimous"

    def __str__(self) -> str:
        """Return the name of the method in human-readable form."""
        match self:
            case VotingMethod.AFFIRMATIVE: return "Affirmative"
            case VotingMethod.CONSENSUS: return "Consensus"
            case VotingMethod.UNANIMOUS: return "Unanimous"


class AblationMethod(Enum):
    """Ways of reducing a group of boxes to the kept detections."""

    NONE = "none"
    NMS = "nms"
    SOFT_NMS = "soft_nms"
    WBF = "wbf"

    def __str__(self) -> str:
        """Return the name of the method in human-readable form."""
        match self:
            case AblationMethod.NONE: return "None"
            case AblationMethod.NMS: return "NMS"
            case AblationMethod.SOFT_NMS: return "Soft-NMS"
            case AblationMethod.WBF: return "WBF"


class SoftNmsDecay(Enum):
    """How Soft-NMS lowers an overlapping score."""

    LINEAR = "linear"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class EnsembleConfig:
    """One of the voting x ablation pathways and its thresholds."""

    voting: VotingMethod = VotingMethod.AFFIRMATIVE
    ablation: AblationMethod = AblationMethod.WBF
    match_iou: float = 0.5
    nms_iou: float = 0.5
    soft_nms_decay: SoftNmsDecay = SoftNmsDecay.LINEAR
    soft_nms_sigma: float = 0.5
    score_floor: float = 0.001

    def __post_init__(self) -> None:
        """
        Check that the thresholds lie in (0, 1].

        nms_iou may not exceed match_iou: every group member overlaps its
        seed by more than match_iou, so soft-NMS then decays every member.
        """
        for name in ("match_iou", "nms_iou"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {value}")
        if self.nms_iou > self.match_iou:
            raise ValueError(f"nms_iou {self.nms_iou} exceeds match_iou "
                             f"{self.match_iou}")
        if self.soft_nms_sigma <= 0.0:
            raise ValueError("soft_nms_sigma must be positive")
        if not 0.0 <= self.score_floor < 1.0:
            raise ValueError("score_floor must be in [0, 1)")

    def __str__(self) -> str:
        """Return the pathway name, e.g. Affirmative-WBF."""
        return f"{self.voting}-{self.ablation}"


@dataclass
class DetectionGroup:
    """Detections from several providers that describe one object."""

    members: list[tuple[int, Detection]]
    seed: int = 0

    @property
    def seed_detection(self) -> Detection:
        """The detection that started the group."""
        return self.members[self.seed][1]

    @property
    def group(self) -> int:
        """The category group shared by every member."""
        return self.seed_detection.group

    @property
    def provider_count(self) -> int:
        """The number of distinct providers contributing to the group."""
        return len({provider for provider, _ in self.members})

    def __len__(self) -> int:
        """Return the number of member detections."""
        return len(self.members)


def group_detections(per_provider: list[ImagePrediction],
                     match_iou: float = 0.5) -> list[DetectionGroup]:
    """
    Cluster the detections of all providers into groups.

    Detections are visited by descending score (ties: lower provider, then
    input order). Each joins the first group whose seed has the same
    category and an IoU strictly above match_iou, or seeds a new group.
    """
    candidates = []
    for provider, prediction in enumerate(per_provider):
        for order, detection in enumerate(prediction.detections):
            candidates.append((provider, order, detection))
    candidates.sort(key=lambda item: (-item[2].score, item[0], item[1]))

    groups: list[DetectionGroup] = []
    for provider, _, detection in candidates:
        for group in groups:
            seed = group.seed_detection
            if (seed.group == detection.group
                    and iou(seed.box, detection.box) > match_iou):
                group.members.append((provider, detection))
                break
        else:
            groups.append(DetectionGroup([(provider, detection)]))

    return groups


def vote(groups: list[DetectionGroup],
         method: VotingMethod,
         n_selected: int) -> list[DetectionGroup]:
    """Keep the groups enough of the queried providers agree on."""
    if n_selected < 1:
        raise ValueError("At least one provider must be queried")

    match method:
        case VotingMethod.AFFIRMATIVE:
            return list(groups)
        case VotingMethod.CONSENSUS:
            return [group for group in groups
                    if group.provider_count > n_selected / 2]
        case VotingMethod.UNANIMOUS:
            return [group for group in groups
                    if group.provider_count == n_selected]


def _keeper_index(group: DetectionGroup) -> int:
    """Return the member with the top score (ties: lower provider)."""
    best = 0
    for number, (provider, detection) in enumerate(group.members):
        best_provider, best_detection = group.members[best]
        if (detection.score > best_detection.score
                or (detection.score == best_detection.score
                    and provider < best_provider)):
            best = number
    return best


def ablate_nms(group: DetectionGroup) -> Detection:
    """Keep only the most confident detection of the group."""
    return group.members[_keeper_index(group)][1]


def ablate_soft_nms(group: DetectionGroup,
                    decay: SoftNmsDecay = SoftNmsDecay.LINEAR,
                    sigma: float = 0.5,
                    nms_iou: float = 0.5,
                    score_floor: float = 0.001) -> list[Detection]:
    """
    Keep the most confident detection and decay the others.

    A member overlapping the keeper by at least nms_iou has its score
    lowered to s * (1 - IoU) (linear) or s * exp(-IoU^2 / sigma)
    (gaussian). Members that fall below score_floor are discarded. The
    keeper is the group seed, so for groups built at match_iou >= nms_iou
    every member is decayed.
    """
    keeper_number = _keeper_index(group)
    keeper = group.members[keeper_number][1]
    kept = [keeper]

    for number, (_, detection) in enumerate(group.members):
        if number == keeper_number:
            continue
        overlap = iou(detection.box, keeper.box)
        score = detection.score
        if overlap >= nms_iou:
            match decay:
                case SoftNmsDecay.LINEAR:
                    score = score * (1.0 - overlap)
                case SoftNmsDecay.GAUSSIAN:
                    score = score * math.exp(-(overlap * overlap) / sigma)
        if score >= score_floor:
            kept.append(detection.with_score(score))

    return kept


def ablate_wbf(group: DetectionGroup) -> Detection:
    """
    Fuse the group into one score-weighted box with the mean score.

    If every score is zero an AllZeroScores warning is issued and the
    plain mean box is returned with score 0.
    """
    boxes = np.array([detection.box.to_list()
                      for _, detection in group.members])
    scores = np.array([detection.score for _, detection in group.members])

    if scores.sum() > 0.0:
        fused = np.average(boxes, axis=0, weights=scores)
    else:
        warnings.warn(f"Group of {len(group)} boxes has only zero scores",
                      AllZeroScores)
        fused = boxes.mean(axis=0)

    # Weighted means can land an ulp outside the member range.
    fused = np.clip(fused, boxes.min(axis=0), boxes.max(axis=0))
    x_min, y_min, x_max, y_max = (float(value) for value in fused)
    score = min(1.0, float(scores.mean()))
    return Detection(group.group, score, BBox(x_min, y_min, x_max, y_max))


def ablate(group: DetectionGroup, config: EnsembleConfig) -> list[Detection]:
    """Apply the configured ablation method to one group."""
    match config.ablation:
        case AblationMethod.NONE:
            return [detection for _, detection in group.members]
        case AblationMethod.NMS:
            return [ablate_nms(group)]
        case AblationMethod.SOFT_NMS:
            return ablate_soft_nms(group, config.soft_nms_decay,
                                   config.soft_nms_sigma, config.nms_iou,
                                   config.score_floor)
        case AblationMethod.WBF:
            return [ablate_wbf(group)]


def ensemble(per_provider: list[ImagePrediction],
             config: EnsembleConfig = EnsembleConfig()) -> ImagePrediction:
    """
    Merge the predictions of the selected providers into one.

    The detections are grouped, the groups are voted on, and each
    surviving group is ablated. The result is sorted by descending score.
    """
    if not per_provider:
        return ImagePrediction()

    groups = group_detections(per_provider, config.match_iou)
    survivors = vote(groups, config.voting, len(per_provider))
    logger.debug("%s: %d of %d groups survive voting", config,
                 len(survivors), len(groups))

    detections: list[Detection] = []
    for group in survivors:
        detections.extend(ablate(group, config))

    detections.sort(key=lambda detection: -detection.score)
    return ImagePrediction(detections)


def all_pathways(base: EnsembleConfig = EnsembleConfig()
                 ) -> list[EnsembleConfig]:
    """Return the 12 voting x ablation pathways sharing base thresholds."""
    pathways = []
    for voting in VotingMethod:
        for ablation in AblationMethod:
            pathways.append(EnsembleConfig(
                voting, ablation, base.match_iou, base.nms_iou,
                base.soft_nms_decay, base.soft_nms_sigma, base.score_floor))
    return pathways
