"""
MLaaS federation engine.

Tests for matching and average precision.

Created by Matua Doc.
Created on 2026-10-19.
"""

import numpy as np
import pytest

from conftest import box, prediction
from main_evaluation import (average_precision, dataset_ap,
                             evaluate_dataset, match, per_image_ap50)
from main_model import (BBox, Detection, EmptyGroundTruth, GroundTruthObject,
                        ImagePrediction)


def truth(group: int, bbox: BBox) -> GroundTruthObject:
    """Return one ground-truth object."""
    return GroundTruthObject(group, bbox)


def reference_ap(preds: dict[str, ImagePrediction],
                 gt: dict[str, list[GroundTruthObject]],
                 threshold: float) -> float:
    """Exhaustive PR-curve construction written independently."""
    categories = sorted({item.group for items in gt.values()
                         for item in items})
    values = []
    for category in categories:
        scored = []
        total = 0
        for image_id in sorted(set(gt) | set(preds)):
            objects = [item for item in gt.get(image_id, [])
                       if item.group == category]
            total += len(objects)
            taken = set()
            detections = [d for d in preds.get(image_id,
                                               ImagePrediction()).detections
                          if d.group == category]
            for detection in sorted(detections, key=lambda d: -d.score):
                overlaps = [(box_iou(detection.box, item.box), -number)
                            for number, item in enumerate(objects)
                            if number not in taken]
                hit = False
                if overlaps:
                    best, negative_index = max(overlaps)
                    if best >= threshold:
                        taken.add(-negative_index)
                        hit = True
                scored.append((detection.score, hit))
        scored.sort(key=lambda item: -item[0])

        points = []
        hits = 0
        for rank, (_, hit) in enumerate(scored, start=1):
            hits += hit
            points.append((hits / total, hits / rank))
        grid_values = []
        for step in range(101):
            level = np.arange(101)[step] / 100
            reachable = [precision for recall, precision in points
                         if recall >= level]
            grid_values.append(max(reachable) if reachable else 0.0)
        values.append(sum(grid_values) / 101)
    return sum(values) / len(values)


def box_iou(a: BBox, b: BBox) -> float:
    """Plain IoU for the reference."""
    width = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    height = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = width * height
    union = ((a.x_max - a.x_min) * (a.y_max - a.y_min)
             + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter)
    return 0.0 if union <= 0 else min(1.0, inter / union)


def random_instance(rng: np.random.Generator):
    """Return random small predictions and ground truth."""
    gt: dict[str, list[GroundTruthObject]] = {}
    preds: dict[str, ImagePrediction] = {}
    for number in range(int(rng.integers(1, 4))):
        image_id = f"img-{number}"
        objects = []
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.uniform(0, 20, size=2)
            objects.append(truth(int(rng.integers(3)),
                                 BBox(x, y, x + rng.uniform(2, 6),
                                      y + rng.uniform(2, 6))))
        gt[image_id] = objects
        detections = []
        for _ in range(int(rng.integers(0, 4))):
            if objects and rng.random() < 0.7:
                source = objects[int(rng.integers(len(objects)))]
                x1, y1, x2, y2 = (np.array(source.box.to_list())
                                  + rng.normal(0, 0.6, size=4))
                bbox = BBox(min(x1, x2), min(y1, y2),
                            max(x1, x2), max(y1, y2))
                group = source.group
            else:
                x, y = rng.uniform(0, 20, size=2)
                bbox = BBox(x, y, x + 3, y + 3)
                group = int(rng.integers(3))
            detections.append(Detection(group, float(rng.uniform(0.01, 1)),
                                        bbox))
        preds[image_id] = ImagePrediction(detections)
    return preds, gt


def total_objects(gt: dict[str, list[GroundTruthObject]]) -> int:
    """Return the number of ground-truth boxes."""
    return sum(len(items) for items in gt.values())


class TestMatch:
    """Greedy TP/FP matching."""

    def test_exact_box(self):
        """A perfect detection is a true positive."""
        result = match(prediction((0, 0.9, box(0, 0, 1, 1))),
                       [truth(0, box(0, 0, 1, 1))], 0.5)
        assert result.true_positive == [True]
        assert result.unmatched == {}

    def test_below_threshold(self):
        """IoU 0.4 at threshold 0.5 is a false positive."""
        result = match(prediction((0, 0.9, box(0, 0, 10, 4))),
                       [truth(0, box(0, 0, 10, 10))], 0.5)
        assert result.true_positive == [False]
        assert result.unmatched == {0: 1}

    def test_ground_truth_claimed_once(self):
        """The second detection cannot reclaim a matched box."""
        result = match(prediction((0, 0.8, box(0, 0, 1, 1)),
                                  (0, 0.9, box(0, 0, 1, 1))),
                       [truth(0, box(0, 0, 1, 1))], 0.5)
        assert [d.score for d in result.detections] == [0.9, 0.8]
        assert result.true_positive == [True, False]

    def test_category_must_agree(self):
        """Other categories are never matched."""
        result = match(prediction((1, 0.9, box(0, 0, 1, 1))),
                       [truth(0, box(0, 0, 1, 1))], 0.5)
        assert result.true_positive == [False]

    def test_threshold_range(self):
        """A zero threshold is rejected."""
        with pytest.raises(ValueError):
            match(ImagePrediction(), [], 0.0)


class TestAveragePrecision:
    """101-point interpolated AP."""

    def test_all_true_positives(self):
        """Every GT found with nothing wrong scores 1."""
        assert average_precision([(0.9, True), (0.8, True)], 2) == 1.0

    def test_half_recall(self):
        """TP then FP on 2 GT: grid points up to recall 0.5 score 1."""
        value = average_precision([(0.9, True), (0.8, False)], 2)
        assert value == pytest.approx(51 / 101)

    def test_no_detections(self):
        """Nothing found scores 0."""
        assert average_precision([], 3) == 0.0

    def test_no_ground_truth(self):
        """Vacuous cases."""
        assert average_precision([], 0) == 1.0
        assert average_precision([(0.5, False)], 0) == 0.0

    def test_low_false_positive_never_helps(self):
        """Appending a lower-scored FP cannot raise AP."""
        rng = np.random.default_rng(6)
        for _ in range(300):
            size = int(rng.integers(1, 8))
            stream = sorted(((float(s), bool(f)) for s, f in
                             zip(rng.uniform(0.1, 1, size),
                                 rng.integers(0, 2, size))),
                            key=lambda item: -item[0])
            total = max(1, sum(flag for _, flag in stream))
            before = average_precision(stream, total)
            after = average_precision(stream + [(0.05, False)], total)
            assert after <= before + 1e-12


class TestDatasetAp:
    """Pooled AP across images."""

    def test_perfect_predictions(self):
        """Predicting the ground truth scores 1 everywhere."""
        gt = {"a": [truth(0, box(0, 0, 1, 1)), truth(1, box(2, 2, 4, 4))],
              "b": [truth(1, box(0, 0, 3, 3))]}
        preds = {image_id: ImagePrediction([Detection(item.group, 1.0,
                                                      item.box)
                                            for item in items])
                 for image_id, items in gt.items()}
        result = dataset_ap(preds, gt, 0.5)
        assert result.per_category == {0: 1.0, 1: 1.0}
        assert result.mean == 1.0

    def test_single_category(self):
        """One category: the mean is that category's AP."""
        gt = {"a": [truth(0, box(0, 0, 1, 1)), truth(0, box(5, 5, 6, 6))]}
        preds = {"a": prediction((0, 0.9, box(0, 0, 1, 1)),
                                 (0, 0.8, box(9, 9, 10, 10)))}
        assert dataset_ap(preds, gt, 0.5).mean == pytest.approx(51 / 101)

    def test_categories_without_ground_truth_excluded(self):
        """A hallucinated category does not enter the mean."""
        gt = {"a": [truth(0, box(0, 0, 1, 1))]}
        preds = {"a": prediction((0, 0.9, box(0, 0, 1, 1)),
                                 (2, 0.9, box(0, 0, 1, 1)))}
        assert dataset_ap(preds, gt, 0.5).per_category == {0: 1.0}

    def test_empty_ground_truth(self):
        """No boxes anywhere is an error."""
        with pytest.raises(EmptyGroundTruth):
            dataset_ap({"a": ImagePrediction()}, {"a": []}, 0.5)

    def test_matches_exhaustive_reference(self):
        """Random small instances agree with the reference to 1e-9."""
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 500:
            preds, gt = random_instance(rng)
            if total_objects(gt) == 0:
                continue
            for threshold in (0.5, 0.75):
                assert abs(dataset_ap(preds, gt, threshold).mean
                           - reference_ap(preds, gt, threshold)) <= 1e-9
            checked += 1

    def test_map_never_exceeds_ap50(self):
        """Stricter thresholds cannot gain."""
        rng = np.random.default_rng(8)
        checked = 0
        while checked < 100:
            preds, gt = random_instance(rng)
            if total_objects(gt) == 0:
                continue
            metrics = evaluate_dataset(preds, gt)
            assert metrics.map <= metrics.ap50 + 1e-12
            assert metrics.ap75 <= metrics.ap50 + 1e-12
            checked += 1

    def test_score_rescaling_invariance(self):
        """Only the ranking of scores matters."""
        rng = np.random.default_rng(9)
        checked = 0
        while checked < 100:
            preds, gt = random_instance(rng)
            if total_objects(gt) == 0:
                continue
            squashed = {image_id: ImagePrediction(
                [Detection(d.group, d.score ** 2 / 2, d.box)
                 for d in pred.detections])
                for image_id, pred in preds.items()}
            assert dataset_ap(squashed, gt, 0.5).mean == \
                pytest.approx(dataset_ap(preds, gt, 0.5).mean, abs=1e-12)
            checked += 1


class TestPerImageAp50:
    """The reward's accuracy term."""

    def test_perfect(self):
        """Reproducing the ground truth scores 1."""
        gt = [truth(0, box(0, 0, 1, 1)), truth(1, box(3, 3, 5, 5))]
        pred = ImagePrediction([Detection(item.group, 0.9, item.box)
                                for item in gt])
        assert per_image_ap50(pred, gt) == 1.0

    def test_empty_prediction(self):
        """Finding nothing scores 0."""
        assert per_image_ap50(ImagePrediction(),
                              [truth(0, box(0, 0, 1, 1))]) == 0.0

    def test_empty_both(self):
        """Nothing to find and nothing found scores 1."""
        assert per_image_ap50(ImagePrediction(), []) == 1.0

    def test_hallucination_on_empty_image(self):
        """Any detection on an empty image scores 0."""
        assert per_image_ap50(prediction((0, 0.5, box(0, 0, 1, 1))),
                              []) == 0.0

    def test_hallucinated_category_is_penalized(self):
        """A wrong extra category halves the score."""
        gt = [truth(0, box(0, 0, 1, 1))]
        pred = prediction((0, 0.9, box(0, 0, 1, 1)),
                          (1, 0.8, box(4, 4, 5, 5)))
        assert per_image_ap50(pred, gt) == pytest.approx(0.5)
