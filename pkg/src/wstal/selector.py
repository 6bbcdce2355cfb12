"""Selection stage: density-prior filtering of candidate proposals.

Proposals clustered around real actions overlap each other heavily, while
spurious ones near action-adjacent background sit alone.  Each proposal is
scored by the *sum* of its IoU against every other proposal of the same
video (a sum, not a mean, so the score tracks local crowding rather than the
video's total proposal count), and only proposals clearing both this density
score and a confidence bar become pseudo labels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import ContractViolation, GroundTruthSegment, Proposal, PseudoLabelSet, iou

FP_MAX_GT_IOU = 0.1  # below this max-IoU against ground truth a proposal counts as a false positive


def iou_scores(proposals: list[Proposal]) -> np.ndarray:
    """Per-proposal sum of pairwise IoUs within one video (class-agnostic)."""
    if not proposals:
        return np.zeros(0, dtype=np.float64)
    vids = {p.video_id for p in proposals}
    if len(vids) != 1:
        raise ContractViolation(f"iou_scores needs proposals of a single video, got {sorted(vids)}")
    starts = np.array([p.interval.start for p in proposals], dtype=np.float64)
    ends = np.array([p.interval.end for p in proposals], dtype=np.float64)
    inter = np.minimum(ends[:, None], ends[None, :]) - np.maximum(starts[:, None], starts[None, :])
    inter = np.maximum(inter, 0.0)
    lengths = ends - starts
    union = lengths[:, None] + lengths[None, :] - inter
    matrix = inter / union
    return matrix.sum(axis=1) - 1.0  # remove the diagonal (self-IoU is exactly 1)


def filter_proposals(proposals: list[Proposal], gamma: float, eta: float) -> PseudoLabelSet:
    """Keep proposals with density score >= gamma and confidence >= eta.

    Density scores are computed per video over the given set and recorded on
    the surviving proposals.
    """
    if gamma < 0:
        raise ContractViolation(f"gamma must be >= 0, got {gamma}")
    if not 0.0 <= eta <= 1.0:
        raise ContractViolation(f"eta must lie in [0, 1], got {eta}")
    by_video: dict[str, list[Proposal]] = {}
    for p in proposals:
        by_video.setdefault(p.video_id, []).append(p)
    kept: list[Proposal] = []
    for vid in sorted(by_video):
        group = by_video[vid]
        scores = iou_scores(group)
        for p, s in zip(group, scores):
            if s >= gamma and p.conf >= eta:
                kept.append(replace(p, iou_score=float(s)))
    return PseudoLabelSet.from_proposals(kept)


@dataclass(frozen=True)
class HistRow:
    bin_upper: float
    fp_count: int
    tp_count: int


def max_gt_iou(proposal: Proposal, segments: list[GroundTruthSegment]) -> float:
    best = 0.0
    for seg in segments:
        if seg.video_id == proposal.video_id:
            best = max(best, iou(proposal.interval, seg.interval))
    return best


def fp_distribution(
    proposals: list[Proposal],
    ground_truth: list[GroundTruthSegment],
    bin_width: float = 0.1,
) -> list[HistRow]:
    """Histogram of density scores split into false/true positives (diagnostics only).

    A proposal is a false positive when its best IoU against any ground-truth
    segment of its video is below ``FP_MAX_GT_IOU``.  Scores fall into bins
    (x - bin_width, x] for x = bin_width, 2*bin_width, ...; the lowest bin is
    closed at zero so isolated proposals (score exactly 0) land in it.
    """
    by_video: dict[str, list[Proposal]] = {}
    for p in proposals:
        by_video.setdefault(p.video_id, []).append(p)
    gt_by_video: dict[str, list[GroundTruthSegment]] = {}
    for seg in ground_truth:
        gt_by_video.setdefault(seg.video_id, []).append(seg)

    binned: dict[int, list[int]] = {}
    for vid in sorted(by_video):
        group = by_video[vid]
        scores = iou_scores(group)
        for p, s in zip(group, scores):
            idx = max(1, int(np.ceil(s / bin_width - 1e-9)))
            counts = binned.setdefault(idx, [0, 0])
            if max_gt_iou(p, gt_by_video.get(vid, [])) < FP_MAX_GT_IOU:
                counts[0] += 1
            else:
                counts[1] += 1
    if not binned:
        return []
    top = max(binned)
    return [
        HistRow(bin_upper=round(i * bin_width, 10), fp_count=binned.get(i, [0, 0])[0], tp_count=binned.get(i, [0, 0])[1])
        for i in range(1, top + 1)
    ]
