"""Decode a class activation sequence into scored interval proposals.

Decoding binarizes each selected class track at several thresholds, merges
nearby runs, scores each run by its mean sigmoid activation, and keeps the
union over thresholds.  The deliberate overlap between threshold levels is
what the downstream density-based filter feeds on, so near-duplicate NMS at
pseudo-label time uses a high IoU bar while inference uses a conventional one.
"""

from __future__ import annotations

import numpy as np

from .core import ContractViolation, Interval, Proposal, iou


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x.astype(np.float64)))


def video_class_scores(logits: np.ndarray, k: int) -> np.ndarray:
    """Softmax over classes of the per-class top-k-mean snippet scores."""
    k = min(k, logits.shape[0])
    pooled = np.sort(logits.astype(np.float64), axis=0)[-k:].mean(axis=0)
    shifted = pooled - pooled.max()
    e = np.exp(shifted)
    return e / e.sum()


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[0], mask.astype(np.int8), [0]])
    diff = np.diff(padded)
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1)
    return list(zip(starts.tolist(), ends.tolist()))


def cas_to_proposals(
    logits: np.ndarray,
    video_id: str,
    k: int,
    thresholds=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7),
    min_len: int = 2,
    merge_gap: int = 1,
    class_keep: float = 0.1,
    label_classes=None,
) -> list[Proposal]:
    """Binarize selected class tracks at each threshold and emit scored runs.

    Classes are selected by video-level score >= ``class_keep``; during
    pseudo-labeling the video's known label classes are added on top.  The
    union over thresholds is returned with exact duplicates removed but
    overlaps kept.
    """
    if len(thresholds) == 0 or not all(0.0 < t < 1.0 for t in thresholds):
        raise ContractViolation(f"thresholds must be non-empty and inside (0, 1), got {thresholds}")
    scores = video_class_scores(logits, k)
    selected = set(np.flatnonzero(scores >= class_keep).tolist())
    if label_classes is not None:
        selected.update(int(c) for c in label_classes)

    proposals: list[Proposal] = []
    seen: set[tuple[int, float, float]] = set()
    for c in sorted(selected):
        track = _sigmoid(logits[:, c])
        for theta in thresholds:
            intervals = [Interval(float(s), float(e)) for s, e in _runs(track >= theta)]
            for iv in merge_adjacent_runs(intervals, merge_gap):
                if iv.length < min_len:
                    continue
                key = (c, iv.start, iv.end)
                if key in seen:
                    continue
                seen.add(key)
                conf = float(track[int(iv.start) : int(iv.end)].mean())
                proposals.append(Proposal(video_id, iv, c, conf))
    return proposals


def merge_adjacent_runs(intervals: list[Interval], gap: float) -> list[Interval]:
    from .core import merge_adjacent

    return merge_adjacent(intervals, gap)


def _priority(p: Proposal) -> tuple:
    return (-p.conf, p.interval.start, -p.interval.length)


def nms(proposals: list[Proposal], iou_threshold: float) -> list[Proposal]:
    """Greedy per-class suppression: keep the best, drop overlaps above the bar.

    Ties break toward the earlier start, then the longer interval.  Output is
    ordered by descending confidence.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ContractViolation(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    kept: list[Proposal] = []
    by_class: dict[int, list[Proposal]] = {}
    for p in proposals:
        by_class.setdefault(p.class_id, []).append(p)
    for c in sorted(by_class):
        pending = sorted(by_class[c], key=_priority)
        while pending:
            best = pending.pop(0)
            kept.append(best)
            pending = [p for p in pending if iou(best.interval, p.interval) <= iou_threshold]
    kept.sort(key=_priority)
    return kept
