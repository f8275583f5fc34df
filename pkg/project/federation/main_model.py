"""
MLaaS federation engine.

Models: boxes, detections and the errors shared by every module.

Created by Matua Doc.
Created on 2026-10-19.
"""

import math
from dataclasses import dataclass, field
from enum import Enum


class FederationError(RuntimeError):
    """Base class for every failure the engine reports."""

    @property
    def kind(self) -> str:
        """The machine-readable name of the error."""
        return type(self).__name__


class TemplateError(FederationError):
    """The grouping template is empty or has duplicate categories."""


class OverrideConflict(FederationError):
    """An override maps one label to two different template categories."""


class EmptyGroundTruth(FederationError):
    """No image has any ground-truth box."""


class EmptyTrace(FederationError):
    """A trace has no records."""


class TraceFormatError(FederationError):
    """A trace file could not be parsed."""


class InvalidAction(FederationError):
    """An action is not a binary vector of the right length."""


class AllZeroAction(InvalidAction):
    """An action selects no provider at all."""


class EpisodeFinished(FederationError):
    """The environment was stepped after the final record."""


class MissingGroundTruth(FederationError):
    """Ground truth was needed but the record carries none."""


class NonFiniteState(FederationError):
    """A state vector contains NaN or infinity."""


class NonFiniteGradient(FederationError):
    """A loss or gradient became NaN or infinite during an update."""


class ActionSpaceTooLarge(FederationError):
    """Exhaustive search was asked for too many providers."""


class IdMismatch(FederationError):
    """Image ids differ between ingestion inputs."""


class UnknownMethod(FederationError):
    """An evaluation method name is not recognised."""


class CheckpointMissing(FederationError):
    """A checkpoint file does not exist."""


class EmptyLog(FederationError):
    """A training log has no rows."""


class ConfigError(FederationError):
    """An experiment configuration is invalid."""


class AllZeroScores(UserWarning):
    """Every member of a fused group had a zero score."""


class BoxFormat(Enum):
    """How a provider writes its boxes."""

    XYXY = "xyxy"
    XYWH = "xywh"

    def __str__(self) -> str:
        """Return the format in human-readable form."""
        match self:
            case BoxFormat.XYXY: return "corners"
            case BoxFormat.XYWH: return "corner plus size"


class Coordinates(Enum):
    """The coordinate convention a trace declares once for all boxes."""

    PIXEL = "pixel"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class BBox:
    """An axis-aligned box in corner form."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        """Check that the corners are finite and ordered."""
        corners = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(value) for value in corners):
            raise ValueError(f"Box has a non-finite corner: {corners}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"Box corners are out of order: {corners}")

    @classmethod
    def from_list(cls, values: list[float],
                  box_format: BoxFormat = BoxFormat.XYXY) -> "BBox":
        """
        Create a box from four numbers.

        Boxes written as (x, y, width, height) are converted to corners.
        """
        if len(values) != 4:
            raise ValueError(f"A box needs 4 numbers, got {len(values)}")
        x1, y1, x2, y2 = (float(value) for value in values)
        if box_format is BoxFormat.XYWH:
            x2 = x1 + x2
            y2 = y1 + y2
        return cls(x1, y1, x2, y2)

    def to_list(self) -> list[float]:
        """Return the corners as a list."""
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def shifted(self, dx: float, dy: float) -> "BBox":
        """Return the box translated by (dx, dy)."""
        return BBox(self.x_min + dx, self.y_min + dy,
                    self.x_max + dx, self.y_max + dy)


def box_area(box: BBox) -> float:
    """Return the area of a box."""
    return (box.x_max - box.x_min) * (box.y_max - box.y_min)


def iou(a: BBox, b: BBox) -> float:
    """
    Return the intersection over union of two boxes.

    Two zero-area boxes have no union, so their IoU is 0.
    """
    width = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    height = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    intersection = max(0.0, width) * max(0.0, height)
    union = box_area(a) + box_area(b) - intersection
    if union <= 0.0:
        return 0.0
    return min(1.0, intersection / union)


def _check_score(score: float) -> None:
    """Raise if a confidence score is outside [0, 1]."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"Score {score} is outside [0, 1]")


@dataclass(frozen=True)
class RawDetection:
    """One object as a provider reports it, before label grouping."""

    _label: str
    _score: float
    _box: BBox

    def __post_init__(self) -> None:
        """Check the label and score."""
        if not self._label.strip():
            raise ValueError("Detection label is empty")
        _check_score(self._score)

    @property
    def label(self) -> str:
        """The category string the provider emitted."""
        return self._label

    @property
    def score(self) -> float:
        """The confidence of the detection."""
        return self._score

    @property
    def box(self) -> BBox:
        """The bounding box."""
        return self._box


@dataclass(frozen=True)
class Detection:
    """One object after its label has been mapped to a category group."""

    _group: int
    _score: float
    _box: BBox

    def __post_init__(self) -> None:
        """Check the group index and score."""
        if self._group < 0:
            raise ValueError(f"Group index {self._group} is negative")
        _check_score(self._score)

    @property
    def group(self) -> int:
        """The category-group index."""
        return self._group

    @property
    def score(self) -> float:
        """The confidence of the detection."""
        return self._score

    @property
    def box(self) -> BBox:
        """The bounding box."""
        return self._box

    def with_score(self, score: float) -> "Detection":
        """Return a copy of the detection with a different score."""
        return Detection(self._group, score, self._box)


@dataclass
class ImagePrediction:
    """Every detection for one image, in no particular order."""

    detections: list[Detection] = field(default_factory=list)

    def __len__(self) -> int:
        """Return the number of detections."""
        return len(self.detections)

    @property
    def is_empty(self) -> bool:
        """Whether there are no detections."""
        return not self.detections

    def sorted_by_score(self) -> list[Detection]:
        """Return the detections by descending score, ties in input order."""
        return sorted(self.detections, key=lambda d: -d.score)


@dataclass(frozen=True)
class GroundTruthObject:
    """One labelled object in an image."""

    group: int
    box: BBox
