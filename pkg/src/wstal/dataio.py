"""Feature-file and manifest I/O plus the synthetic oracle dataset.

File formats
------------
WSTF feature file (binary, little-endian):
    magic "WSTF" (4 bytes), version u32 = 1, T u32, D u32,
    then T*D float32 values row-major.

Manifest: JSON array of entry objects
    {"video_id", "feature_path", "label_class_ids", "seconds_per_snippet"},
    feature paths resolved relative to the manifest's directory.

Segments and proposals: JSON Lines, one object per row
    {"video_id", "start", "end", "class_id"} plus, for proposals,
    "conf" and optionally "iou_score".  Start/end are snippet units.
    An optional leading {"_meta": {...}} line carries provenance and is
    skipped by readers.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    ConfigError,
    ContractViolation,
    DataError,
    FormatError,
    GroundTruthSegment,
    Interval,
    Proposal,
    VideoRecord,
)

WSTF_MAGIC = b"WSTF"
WSTF_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_features(path, matrix: np.ndarray) -> None:
    """Write a T x D float32 matrix in the WSTF layout."""
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ContractViolation(f"feature matrix must be 2-D with positive dims, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DataError("refusing to write non-finite feature values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(WSTF_MAGIC, WSTF_VERSION, m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m).tobytes())


def read_features(path) -> np.ndarray:
    """Read a WSTF file back into a float32 matrix, bit-exactly."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, got {len(raw)} bytes", offset=0)
    magic, version, t, d = _HEADER.unpack_from(raw, 0)
    if magic != WSTF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {WSTF_MAGIC!r}", offset=0)
    if version != WSTF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if t < 1:
        raise FormatError(f"{path}: snippet count must be >= 1, got {t}", offset=8)
    if d < 1:
        raise FormatError(f"{path}: feature dim must be >= 1, got {d}", offset=12)
    expected = _HEADER.size + 4 * t * d
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes total, got {len(raw)}",
            offset=_HEADER.size,
        )
    m = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, d)
    if not np.all(np.isfinite(m)):
        raise DataError(f"{path}: feature matrix contains non-finite values")
    return m.copy()


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    feature_path: str
    label_class_ids: tuple[int, ...]
    seconds_per_snippet: float = 1.0

    def __post_init__(self):
        if not self.label_class_ids:
            raise ContractViolation(f"manifest entry {self.video_id!r} needs at least one label class")


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    payload = [
        {
            "video_id": e.video_id,
            "feature_path": e.feature_path,
            "label_class_ids": list(e.label_class_ids),
            "seconds_per_snippet": e.seconds_per_snippet,
        }
        for e in entries
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(payload, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    entries = []
    seen = set()
    for i, obj in enumerate(payload):
        try:
            entry = ManifestEntry(
                video_id=str(obj["video_id"]),
                feature_path=str(obj["feature_path"]),
                label_class_ids=tuple(int(c) for c in obj["label_class_ids"]),
                seconds_per_snippet=float(obj.get("seconds_per_snippet", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad manifest entry #{i}: {exc}") from exc
        if entry.video_id in seen:
            raise FormatError(f"{path}: duplicate video_id {entry.video_id!r}")
        seen.add(entry.video_id)
        entries.append(entry)
    return entries


def load_videos(manifest_path, num_classes: int) -> list[VideoRecord]:
    """Materialize VideoRecords from a manifest, resolving relative feature paths."""
    base = Path(manifest_path).parent
    records = []
    for entry in read_manifest(manifest_path):
        fpath = Path(entry.feature_path)
        if not fpath.is_absolute():
            fpath = base / fpath
        label = np.zeros(num_classes, dtype=np.float32)
        for c in entry.label_class_ids:
            if not 0 <= c < num_classes:
                raise DataError(f"video {entry.video_id!r}: class id {c} outside [0, {num_classes})")
            label[c] = 1.0
        records.append(
            VideoRecord(
                id=entry.video_id,
                features=read_features(fpath),
                label=label,
                seconds_per_snippet=entry.seconds_per_snippet,
            )
        )
    return records


def _write_jsonl(path, rows: list[dict], meta: dict | None) -> None:
    with open(path, "w") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if "_meta" in obj:
            continue
        rows.append(obj)
    return rows


def write_proposals(path, proposals: list[Proposal], meta: dict | None = None) -> None:
    rows = []
    for p in proposals:
        row = {
            "video_id": p.video_id,
            "start": p.interval.start,
            "end": p.interval.end,
            "class_id": p.class_id,
            "conf": p.conf,
        }
        if p.iou_score is not None:
            row["iou_score"] = p.iou_score
        rows.append(row)
    _write_jsonl(path, rows, meta)


def read_proposals(path) -> list[Proposal]:
    out = []
    for obj in _read_jsonl(path):
        out.append(
            Proposal(
                video_id=str(obj["video_id"]),
                interval=Interval(float(obj["start"]), float(obj["end"])),
                class_id=int(obj["class_id"]),
                conf=float(obj["conf"]),
                iou_score=float(obj["iou_score"]) if "iou_score" in obj else None,
            )
        )
    return out


def write_segments(path, segments: list[GroundTruthSegment], meta: dict | None = None) -> None:
    rows = [
        {"video_id": s.video_id, "start": s.interval.start, "end": s.interval.end, "class_id": s.class_id}
        for s in segments
    ]
    _write_jsonl(path, rows, meta)


def read_segments(path) -> list[GroundTruthSegment]:
    return [
        GroundTruthSegment(
            video_id=str(obj["video_id"]),
            interval=Interval(float(obj["start"]), float(obj["end"])),
            class_id=int(obj["class_id"]),
        )
        for obj in _read_jsonl(path)
    ]


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic oracle dataset.

    Each video is background-prototype noise with a few planted actions drawn
    from per-class prototypes.  With probability ``confusable_prob`` an
    unlabeled look-alike segment (a class-correlated prototype) is planted
    next to a true action, mimicking context that fires the classifier
    without being the action itself.
    """

    num_videos: int = 50
    num_classes: int = 5
    num_snippets: int = 200
    feature_dim: int = 16  # per modality; stored features have 2x this width
    actions_per_video: tuple[int, int] = (1, 3)
    action_length: tuple[int, int] = (25, 50)
    noise_sigma: float = 0.25
    confusable_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_videos", "num_classes", "num_snippets", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.confusable_prob <= 1.0:
            raise ConfigError(f"confusable_prob must lie in [0, 1], got {self.confusable_prob}")
        lo, hi = self.actions_per_video
        if lo < 1 or hi < lo:
            raise ConfigError(f"actions_per_video range invalid: {self.actions_per_video}")
        llo, lhi = self.action_length
        if llo < 1 or lhi < llo:
            raise ConfigError(f"action_length range invalid: {self.action_length}")
        if lhi > self.num_snippets:
            raise ConfigError(
                f"action_length upper bound {lhi} exceeds video length {self.num_snippets}"
            )
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


# Gap kept clear around planted segments so distinct events never touch and
# decoding cannot merge an action with its neighbor or its confusable.
_PLACEMENT_MARGIN = 4
_CONFUSABLE_GAP = 3

# Actions ramp in and out (attack/decay) across a third of their extent and
# wobble in intensity; confusables stay flat.  The long graded boundaries are
# what give classifier activations the nested multi-threshold proposal
# structure around real actions, while flat look-alikes decode to isolated
# near-duplicates.
_RAMP_FRACTION = 0.35
_RAMP_FLOOR = 0.05
_WOBBLE_DEPTH = 0.3
_PEAK_RANGE = (1.0, 1.0)


def _action_amplitude(length: int, rng: np.random.Generator) -> np.ndarray:
    ramp = max(2, int(length * _RAMP_FRACTION))
    peak = float(rng.uniform(*_PEAK_RANGE))
    amp = np.full(length, peak)
    rise = np.linspace(_RAMP_FLOOR, peak, ramp + 1)[:-1]
    amp[:ramp] = rise
    amp[length - ramp:] = rise[::-1]
    period = float(rng.uniform(7.0, 13.0))
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    wobble = 1.0 + _WOBBLE_DEPTH * np.sin(2.0 * np.pi * np.arange(length) / period + phase)
    return np.clip(amp * wobble, 0.0, 1.0)


def generate_synth(config: SynthConfig) -> tuple[list[VideoRecord], list[GroundTruthSegment]]:
    """Build the oracle dataset; deterministic for a fixed seed.

    Returns the videos (features + multi-hot labels only) and the planted
    ground-truth segments separately, so training code can never see timing
    annotations by accident.
    """
    rng = np.random.default_rng(config.seed)
    d2 = 2 * config.feature_dim
    class_protos = np.stack([_unit(rng.standard_normal(d2)) for _ in range(config.num_classes)])
    background = _unit(rng.standard_normal(d2))
    confusable_protos = np.stack(
        [_unit(0.7 * class_protos[c] + 0.3 * _unit(rng.standard_normal(d2))) for c in range(config.num_classes)]
    )

    videos: list[VideoRecord] = []
    ground_truth: list[GroundTruthSegment] = []
    t_total = config.num_snippets

    for v in range(config.num_videos):
        vid = f"synth_{v:04d}"
        claimed: list[tuple[int, int]] = []

        def fits(start: int, length: int) -> bool:
            if start < 0 or start + length > t_total:
                return False
            for s, e in claimed:
                if start < e + _PLACEMENT_MARGIN and s < start + length + _PLACEMENT_MARGIN:
                    return False
            return True

        n_actions = int(rng.integers(config.actions_per_video[0], config.actions_per_video[1] + 1))
        actions: list[tuple[int, int, int]] = []  # (start, length, class)
        for _ in range(n_actions):
            c = int(rng.integers(0, config.num_classes))
            length = int(rng.integers(config.action_length[0], config.action_length[1] + 1))
            for _attempt in range(100):
                start = int(rng.integers(0, t_total - length + 1))
                if fits(start, length):
                    claimed.append((start, start + length))
                    actions.append((start, length, c))
                    break
        if not actions:
            # always possible: a lone segment fits an empty video
            length = config.action_length[0]
            c = int(rng.integers(0, config.num_classes))
            claimed.append((0, length))
            actions.append((0, length, c))

        confusables: list[tuple[int, int, int]] = []
        for start, length, c in actions:
            if rng.random() >= config.confusable_prob:
                continue
            clen = max(3, length // 2)
            right = start + length + _CONFUSABLE_GAP
            left = start - _CONFUSABLE_GAP - clen
            if fits(right, clen):
                claimed.append((right, right + clen))
                confusables.append((right, clen, c))
            elif fits(left, clen):
                claimed.append((left, left + clen))
                confusables.append((left, clen, c))

        feats = background + config.noise_sigma * rng.standard_normal((t_total, d2))
        for start, length, c in actions:
            amp = _action_amplitude(length, rng)[:, None]
            feats[start : start + length] = (
                amp * class_protos[c]
                + (1.0 - amp) * background
                + config.noise_sigma * rng.standard_normal((length, d2))
            )
        for start, clen, c in confusables:
            feats[start : start + clen] = confusable_protos[c] + config.noise_sigma * rng.standard_normal((clen, d2))

        label = np.zeros(config.num_classes, dtype=np.float32)
        for start, length, c in actions:
            label[c] = 1.0
            ground_truth.append(GroundTruthSegment(vid, Interval(float(start), float(start + length)), c))
        videos.append(VideoRecord(id=vid, features=feats.astype(np.float32), label=label))

    return videos, ground_truth


def write_dataset(out_dir, videos: list[VideoRecord], ground_truth: list[GroundTruthSegment]) -> None:
    """Dump a dataset as WSTF files + manifest + ground-truth JSONL."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for video in videos:
        rel = f"features/{video.id}.wstf"
        write_features(out / rel, video.features)
        entries.append(
            ManifestEntry(
                video_id=video.id,
                feature_path=rel,
                label_class_ids=tuple(video.label_class_ids()),
                seconds_per_snippet=video.seconds_per_snippet,
            )
        )
    write_manifest(out / "manifest.json", entries)
    write_segments(out / "ground_truth.jsonl", ground_truth)
