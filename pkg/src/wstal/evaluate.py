"""Temporal-IoU mAP evaluation.

Average precision per class uses greedy one-to-one matching (each prediction
claims the unmatched ground-truth segment of its video with the highest IoU,
provided it clears the tIoU bar) and all-point interpolation of the
precision-recall curve.  mAP at a tIoU is the mean over classes that have
ground truth; the summary table reports the standard three averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EvaluationError, GroundTruthSegment, Proposal, iou

DEFAULT_TIOUS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


def _ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(
    predictions: list[Proposal],
    ground_truth: list[GroundTruthSegment],
    tiou: float,
) -> float:
    """AP for a single class at one tIoU threshold.

    Predictions are ranked by descending confidence (ties: earlier start
    first); a prediction is a true positive iff its best-IoU unmatched
    ground-truth segment in the same video reaches ``tiou``.
    """
    if not ground_truth:
        raise EvaluationError("average_precision needs at least one ground-truth segment")
    npos = len(ground_truth)
    if not predictions:
        return 0.0
    ranked = sorted(predictions, key=lambda p: (-p.conf, p.interval.start, p.video_id))
    gt_by_video: dict[str, list[GroundTruthSegment]] = {}
    for seg in ground_truth:
        gt_by_video.setdefault(seg.video_id, []).append(seg)
    matched: dict[str, list[bool]] = {vid: [False] * len(segs) for vid, segs in gt_by_video.items()}

    tp = np.zeros(len(ranked))
    fp = np.zeros(len(ranked))
    for rank, pred in enumerate(ranked):
        segs = gt_by_video.get(pred.video_id, [])
        best_iou, best_j = 0.0, -1
        for j, seg in enumerate(segs):
            if matched[pred.video_id][j]:
                continue
            overlap = iou(pred.interval, seg.interval)
            if overlap > best_iou:
                best_iou, best_j = overlap, j
        if best_j >= 0 and best_iou >= tiou:
            matched[pred.video_id][best_j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / npos
    precision = cum_tp / (cum_tp + cum_fp)
    return _ap_from_pr(precision, recall)


@dataclass(frozen=True)
class MapResult:
    tious: tuple
    per_tiou: dict
    avg_low: float  # mean over tIoU in [0.1, 0.5]
    avg_high: float  # mean over tIoU in [0.3, 0.7]
    avg_all: float

    def csv_rows(self, run_label: str = "run") -> list[list[str]]:
        header = ["run"] + [f"map_{t:g}" for t in self.tious] + ["avg_0.1_0.5", "avg_0.3_0.7", "avg_0.1_0.7"]
        row = [run_label] + [f"{100 * self.per_tiou[t]:.4f}" for t in self.tious]
        row += [f"{100 * self.avg_low:.4f}", f"{100 * self.avg_high:.4f}", f"{100 * self.avg_all:.4f}"]
        return [header, row]


def map_suite(
    predictions: list[Proposal],
    ground_truth: list[GroundTruthSegment],
    tious=DEFAULT_TIOUS,
) -> MapResult:
    """mAP at each tIoU plus the three summary averages."""
    if not ground_truth:
        raise EvaluationError("map_suite needs non-empty ground truth")
    classes = sorted({seg.class_id for seg in ground_truth})
    preds_by_class: dict[int, list[Proposal]] = {c: [] for c in classes}
    for p in predictions:
        if p.class_id in preds_by_class:
            preds_by_class[p.class_id].append(p)
    gt_by_class: dict[int, list[GroundTruthSegment]] = {c: [] for c in classes}
    for seg in ground_truth:
        gt_by_class[seg.class_id].append(seg)

    per_tiou = {}
    for t in tious:
        aps = [average_precision(preds_by_class[c], gt_by_class[c], t) for c in classes]
        per_tiou[t] = float(np.mean(aps))

    def avg(lo: float, hi: float) -> float:
        vals = [per_tiou[t] for t in tious if lo - 1e-9 <= t <= hi + 1e-9]
        return float(np.mean(vals)) if vals else float("nan")

    return MapResult(
        tious=tuple(tious),
        per_tiou=per_tiou,
        avg_low=avg(0.1, 0.5),
        avg_high=avg(0.3, 0.7),
        avg_all=avg(min(tious), max(tious)),
    )
