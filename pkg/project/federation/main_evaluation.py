"""
MLaaS federation engine.

COCO-style average precision for datasets and single images.

Created by Matua Doc.
Created on 2026-10-19.
"""

from dataclasses import dataclass, field

import numpy as np

from main_model import (Detection, EmptyGroundTruth, GroundTruthObject,
                        ImagePrediction, iou)

# Ground truth per image id.
GroundTruth = dict[str, list[GroundTruthObject]]

# Recall grid of the 101-point interpolation.
RECALL_GRID = np.arange(101) / 100

# IoU thresholds averaged into mAP: 0.50, 0.55, ..., 0.95.
MAP_THRESHOLDS = [round(0.5 + 0.05 * step, 2) for step in range(10)]


@dataclass
class MatchResult:
    """TP/FP flags for one image's detections at one IoU threshold."""

    detections: list[Detection] = field(default_factory=list)
    true_positive: list[bool] = field(default_factory=list)
    unmatched: dict[int, int] = field(default_factory=dict)
    gt_counts: dict[int, int] = field(default_factory=dict)


def match(preds: ImagePrediction,
          gt_image: list[GroundTruthObject],
          iou_thr: float) -> MatchResult:
    """
    Greedily match detections to ground-truth boxes of the same category.

    Detections are visited by descending score (ties: input order). Each
    claims the unmatched ground truth with the highest IoU (ties: first
    index) if that IoU reaches iou_thr; otherwise it is a false positive.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"IoU threshold {iou_thr} is outside (0, 1]")

    result = MatchResult()
    claimed = [False] * len(gt_image)
    for truth in gt_image:
        result.gt_counts[truth.group] = result.gt_counts.get(truth.group,
                                                             0) + 1

    for detection in preds.sorted_by_score():
        best_index = -1
        best_overlap = -1.0
        for index, truth in enumerate(gt_image):
            if claimed[index] or truth.group != detection.group:
                continue
            overlap = iou(detection.box, truth.box)
            if overlap > best_overlap:
                best_index = index
                best_overlap = overlap

        is_match = best_index >= 0 and best_overlap >= iou_thr
        if is_match:
            claimed[best_index] = True
        result.detections.append(detection)
        result.true_positive.append(is_match)

    for index, truth in enumerate(gt_image):
        if not claimed[index]:
            result.unmatched[truth.group] = result.unmatched.get(
                truth.group, 0) + 1

    return result


def average_precision(stream: list[tuple[float, bool]],
                      total_gt: int) -> float:
    """
    Integrate a precision-recall curve with 101-point interpolation.

    Parameters:
    - stream (list): (score, is_true_positive) pairs, already sorted by
      descending score.
    - total_gt (int): the number of ground-truth boxes.

    With no ground truth the result is 1 if there are no detections and
    0 otherwise.
    """
    if total_gt < 0:
        raise ValueError("total_gt cannot be negative")
    if total_gt == 0:
        return 1.0 if not stream else 0.0
    if not stream:
        return 0.0

    flags = np.array([is_tp for _, is_tp in stream], dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / total_gt
    precision = tp / (tp + fp)

    # Precision envelope: the best precision at any recall to the right.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]

    positions = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.zeros_like(RECALL_GRID)
    inside = positions < len(recall)
    sampled[inside] = envelope[positions[inside]]
    return float(sampled.mean())


@dataclass
class DatasetAP:
    """Per-category AP at one IoU threshold, and their mean."""

    per_category: dict[int, float]
    mean: float


def dataset_ap(preds: dict[str, ImagePrediction],
               gt: GroundTruth,
               iou_thr: float) -> DatasetAP:
    """
    Return the AP of each category pooled over every image.

    Categories with no ground truth are left out of the mean. Images with
    predictions but no ground-truth entry count as having no objects.

    Raises EmptyGroundTruth if no image has a ground-truth box.
    """
    streams: dict[int, list[tuple[float, bool]]] = {}
    totals: dict[int, int] = {}

    for image_id in sorted(set(gt) | set(preds)):
        prediction = preds.get(image_id, ImagePrediction())
        result = match(prediction, gt.get(image_id, []), iou_thr)
        for group, count in result.gt_counts.items():
            totals[group] = totals.get(group, 0) + count
        for detection, is_tp in zip(result.detections,
                                    result.true_positive):
            streams.setdefault(detection.group, []).append(
                (detection.score, is_tp))

    if not totals:
        raise EmptyGroundTruth("No image has any ground-truth box")

    per_category = {}
    for group in sorted(totals):
        # Stable sort keeps image and detection order on equal scores.
        stream = sorted(streams.get(group, []), key=lambda item: -item[0])
        per_category[group] = average_precision(stream, totals[group])

    mean = float(np.mean(list(per_category.values())))
    return DatasetAP(per_category, mean)


@dataclass(frozen=True)
class DetectionMetrics:
    """The headline numbers of a set of predictions."""

    map: float
    ap50: float
    ap75: float


def evaluate_dataset(preds: dict[str, ImagePrediction],
                     gt: GroundTruth) -> DetectionMetrics:
    """Return mAP over 0.50:0.05:0.95 together with AP50 and AP75."""
    by_threshold = {threshold: dataset_ap(preds, gt, threshold).mean
                    for threshold in MAP_THRESHOLDS}
    return DetectionMetrics(float(np.mean(list(by_threshold.values()))),
                            by_threshold[0.5], by_threshold[0.75])


def per_image_ap50(pred: ImagePrediction,
                   gt_image: list[GroundTruthObject]) -> float:
    """
    Return the AP50 of one image's prediction.

    AP is averaged over every category present in the ground truth or the
    prediction, so hallucinated categories score 0. An empty prediction
    against empty ground truth scores 1.
    """
    result = match(pred, gt_image, 0.5)
    categories = set(result.gt_counts) | {detection.group
                                          for detection in pred.detections}
    if not categories:
        return 1.0

    values = []
    for group in sorted(categories):
        stream = [(detection.score, is_tp) for detection, is_tp
                  in zip(result.detections, result.true_positive)
                  if detection.group == group]
        values.append(average_precision(stream,
                                        result.gt_counts.get(group, 0)))
    return float(np.mean(values))
