"""Shared domain types and 1-D interval algebra.

Time is measured in snippet indices throughout (fractional values allowed);
conversion to seconds happens only at I/O boundaries via the
``seconds_per_snippet`` carried on each video.  All types are immutable
values after construction and safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(PipelineError):
    """An argument violated a documented precondition or invariant."""


class FormatError(PipelineError):
    """A binary or JSON artifact does not match its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(PipelineError):
    """Well-formed file with unusable content (e.g. non-finite values)."""


class ConfigError(PipelineError):
    """A configuration value or combination is invalid."""


class MissingArtifact(PipelineError):
    """A declared input artifact does not exist on disk."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message)
        self.path = path


class TrainingError(PipelineError):
    """Optimization failed (non-finite loss or gradient)."""


class EvaluationError(PipelineError):
    """Evaluation inputs are unusable (e.g. empty ground truth)."""


@dataclass(frozen=True)
class Interval:
    """Half-open span [start, end) in snippet units; length is end - start."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ContractViolation(f"interval bounds must be finite, got [{self.start}, {self.end})")
        if self.start < 0:
            raise ContractViolation(f"interval start must be non-negative, got {self.start}")
        if not self.start < self.end:
            raise ContractViolation(f"interval needs start < end, got [{self.start}, {self.end})")

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)


def iou(a: Interval, b: Interval) -> float:
    """Intersection over union of two intervals; 0 when disjoint, symmetric."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def merge_adjacent(intervals: list[Interval], gap: float) -> list[Interval]:
    """Fuse intervals whose pairwise gap is <= ``gap``.

    Output is sorted by start and every remaining pair is separated by more
    than ``gap``.  Overlapping intervals always fuse (negative gap).
    Idempotent: applying twice equals applying once.
    """
    if not intervals:
        return []
    ordered = sorted(intervals, key=lambda iv: (iv.start, iv.end))
    merged = [ordered[0]]
    for iv in ordered[1:]:
        last = merged[-1]
        if iv.start - last.end <= gap:
            if iv.end > last.end:
                merged[-1] = Interval(last.start, iv.end)
        else:
            merged.append(iv)
    return merged


@dataclass(frozen=True, eq=False)
class VideoRecord:
    """One untrimmed video: T x D snippet features plus its multi-hot label.

    ``features`` columns are the concatenated per-snippet descriptors of both
    modalities (D = 2d).  The label marks which action classes occur somewhere
    in the video; it carries no timing information.
    """

    id: str
    features: np.ndarray
    label: np.ndarray
    seconds_per_snippet: float = 1.0

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ContractViolation(f"features must be a T x D matrix with T,D >= 1, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ContractViolation(f"video {self.id!r} has non-finite feature values")
        if self.label.ndim != 1 or not np.any(self.label > 0):
            raise ContractViolation(f"video {self.id!r} needs at least one labeled class")
        if self.seconds_per_snippet <= 0:
            raise ContractViolation("seconds_per_snippet must be positive")

    @property
    def num_snippets(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def label_class_ids(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.label > 0)]


@dataclass(frozen=True)
class Proposal:
    """A candidate action: interval, class, mean confidence, optional density score."""

    video_id: str
    interval: Interval
    class_id: int
    conf: float
    iou_score: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.conf <= 1.0:
            raise ContractViolation(f"conf must lie in [0, 1], got {self.conf}")
        if self.iou_score is not None and self.iou_score < 0:
            raise ContractViolation(f"iou_score must be non-negative, got {self.iou_score}")
        if self.class_id < 0:
            raise ContractViolation(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True)
class GroundTruthSegment:
    """Annotated action segment; used only by evaluation and the synthetic oracle."""

    video_id: str
    interval: Interval
    class_id: int


@dataclass(frozen=True)
class PseudoLabelSet:
    """Filtered proposals grouped per video, used as student supervision."""

    by_video: dict[str, tuple[Proposal, ...]] = field(default_factory=dict)

    @classmethod
    def from_proposals(cls, proposals) -> "PseudoLabelSet":
        grouped: dict[str, list[Proposal]] = {}
        for p in proposals:
            grouped.setdefault(p.video_id, []).append(p)
        return cls({vid: tuple(grouped[vid]) for vid in sorted(grouped)})

    def for_video(self, video_id: str) -> tuple[Proposal, ...]:
        return self.by_video.get(video_id, ())

    def all_proposals(self) -> list[Proposal]:
        return [p for vid in sorted(self.by_video) for p in self.by_video[vid]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_video.values())
