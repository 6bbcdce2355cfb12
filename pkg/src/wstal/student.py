"""Training stage: anchor-free regression student with an EMA shadow teacher.

The student shares the generator's conv trunk shape but adds two heads: a
per-class sigmoid classifier and a two-channel softplus regression head
predicting non-negative (left, right) offsets from each snippet to its action
boundaries.  Supervision comes from filtered proposals treated as hard
labels; after the supervised phase the EMA shadow decodes fresh, smoother
pseudo labels and the student trains on those for a final round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from . import postprocess
from .core import (
    ConfigError,
    ContractViolation,
    Interval,
    Proposal,
    PseudoLabelSet,
    TrainingError,
    VideoRecord,
)
from .diffnum import ModelParams, Tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
_LOG_EPS = 1e-7


@dataclass(frozen=True)
class StudentConfig:
    """Training-stage hyperparameters.

    ``iterations`` is the total budget; the supervised phase takes
    ``1 - distill_fraction`` of it and the EMA-distillation round the rest.
    """

    k: int
    iterations: int = 6000
    lr: float = 1e-4
    batch: int = 16
    embed_dim: int = 256
    ema_alpha: float = 0.999
    eta_prime: float = 0.4
    distill_fraction: float = 1.0 / 3.0
    use_mil: bool = True
    score_thresh: float = 0.1
    nms_iou: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigError(f"ema_alpha must lie in [0, 1], got {self.ema_alpha}")
        if not 0.0 <= self.eta_prime <= 1.0:
            raise ConfigError(f"eta_prime must lie in [0, 1], got {self.eta_prime}")
        if not 0.0 <= self.distill_fraction < 1.0:
            raise ConfigError(f"distill_fraction must lie in [0, 1), got {self.distill_fraction}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")

    @property
    def supervised_iterations(self) -> int:
        return self.iterations - self.distill_iterations

    @property
    def distill_iterations(self) -> int:
        return int(round(self.iterations * self.distill_fraction))


@dataclass
class StudentOut:
    class_logits: Tensor  # T x C
    offsets: Tensor  # T x 2, non-negative (left, right)


@dataclass
class StudentNet:
    params: ModelParams
    in_dim: int
    embed_dim: int
    num_classes: int
    kernel_width: int = 3

    @classmethod
    def create(cls, in_dim: int, embed_dim: int, num_classes: int, rng: np.random.Generator,
               kernel_width: int = 3) -> "StudentNet":
        from .generator import _he_pair

        tensors = {}
        tensors["trunk.conv1.weight"], tensors["trunk.conv1.bias"] = _he_pair(rng, kernel_width * in_dim, embed_dim)
        tensors["trunk.conv2.weight"], tensors["trunk.conv2.bias"] = _he_pair(rng, kernel_width * embed_dim, embed_dim)
        tensors["head.class.weight"], tensors["head.class.bias"] = _he_pair(rng, embed_dim, num_classes)
        tensors["head.reg.weight"], tensors["head.reg.bias"] = _he_pair(rng, embed_dim, 2)
        return cls(ModelParams(tensors), in_dim, embed_dim, num_classes, kernel_width)

    def forward(self, features: np.ndarray) -> StudentOut:
        p = self.params
        x = Tensor(features)
        h = dn.relu(dn.conv1d(x, p["trunk.conv1.weight"], p["trunk.conv1.bias"], self.kernel_width))
        h = dn.relu(dn.conv1d(h, p["trunk.conv2.weight"], p["trunk.conv2.bias"], self.kernel_width))
        class_logits = dn.affine(h, p["head.class.weight"], p["head.class.bias"])
        offsets = dn.softplus(dn.affine(h, p["head.reg.weight"], p["head.reg.bias"]))
        return StudentOut(class_logits=class_logits, offsets=offsets)

    def arch_meta(self) -> dict:
        return {
            "kind": "student",
            "in_dim": self.in_dim,
            "embed_dim": self.embed_dim,
            "num_classes": self.num_classes,
            "kernel_width": self.kernel_width,
        }


@dataclass(frozen=True)
class SnippetTargets:
    """Per-snippet supervision: class id (-1 for background) and boundary offsets."""

    class_ids: np.ndarray  # (T,) int, -1 where background
    offsets: np.ndarray  # (T, 2) float32, valid where class_ids >= 0

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.class_ids >= 0)


def assign_targets(proposals, num_snippets: int) -> SnippetTargets:
    """Snippet t is positive for label (s, e, c) iff s <= t < e; shortest label wins.

    Offsets are (t - s, e - t) in snippet units.  Everything uncovered is
    background.
    """
    class_ids = np.full(num_snippets, -1, dtype=np.int64)
    offsets = np.zeros((num_snippets, 2), dtype=np.float32)
    best_len = np.full(num_snippets, np.inf)
    for p in proposals:
        s, e = p.interval.start, p.interval.end
        if s < 0 or e > num_snippets:
            raise ContractViolation(
                f"pseudo label [{s}, {e}) outside [0, {num_snippets}) for video {p.video_id!r}"
            )
        t_first = int(math.ceil(s))
        t_last = int(math.ceil(e))  # exclusive; t < e
        length = e - s
        for t in range(max(t_first, 0), min(t_last, num_snippets)):
            if length < best_len[t]:
                best_len[t] = length
                class_ids[t] = p.class_id
                offsets[t, 0] = t - s
                offsets[t, 1] = e - t
    return SnippetTargets(class_ids=class_ids, offsets=offsets)


def focal_loss(class_probs: Tensor, targets: SnippetTargets) -> Tensor:
    """Sigmoid focal loss over the T x C grid, normalized by positive count (min 1)."""
    t_len, num_classes = class_probs.shape
    pos_mask = np.zeros((t_len, num_classes), dtype=class_probs.data.dtype)
    pos_idx = targets.positive_indices
    pos_mask[pos_idx, targets.class_ids[pos_idx]] = 1.0
    neg_mask = 1.0 - pos_mask
    p = class_probs
    loss_pos = -FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * dn.log(p + _LOG_EPS)
    loss_neg = -(1.0 - FOCAL_ALPHA) * p**FOCAL_GAMMA * dn.log(1.0 - p + _LOG_EPS)
    total = (loss_pos * pos_mask + loss_neg * neg_mask).sum()
    return total / float(max(1, pos_idx.size))


def _diou_terms(pred_start, pred_end, tgt_start, tgt_end):
    inter = dn.relu(dn.minimum(pred_end, tgt_end) - dn.maximum(pred_start, tgt_start))
    union = (pred_end - pred_start) + (tgt_end - tgt_start) - inter
    iou_val = inter / union
    center_pred = (pred_start + pred_end) * 0.5
    center_tgt = (tgt_start + tgt_end) * 0.5
    span = dn.maximum(pred_end, tgt_end) - dn.minimum(pred_start, tgt_start)
    return 1.0 - iou_val + ((center_pred - center_tgt) / span) ** 2


def diou_loss_batch(positions: np.ndarray, offsets: Tensor, target_intervals: np.ndarray) -> Tensor:
    """Mean distance-IoU loss over positive snippets.

    ``positions`` are the snippet indices, ``offsets`` the predicted (left,
    right) rows at those snippets, ``target_intervals`` the matching (start,
    end) pairs.
    """
    t = positions.astype(np.float64).reshape(-1, 1)
    left = dn.take_column(offsets, 0)
    right = dn.take_column(offsets, 1)
    pred_start = -left + t
    pred_end = right + t
    dtype = offsets.data.dtype
    tgt_start = Tensor(target_intervals[:, 0:1], dtype=dtype)
    tgt_end = Tensor(target_intervals[:, 1:2], dtype=dtype)
    return _diou_terms(pred_start, pred_end, tgt_start, tgt_end).mean()


def diou_loss(pred, target: Interval) -> float:
    """Scalar distance-IoU loss between two intervals.

    ``pred`` may be an Interval or a raw (start, end) pair; a zero-length
    prediction is allowed and scores IoU 0 with its center at the point.
    """
    ps, pe = (pred.start, pred.end) if isinstance(pred, Interval) else (float(pred[0]), float(pred[1]))
    inter = max(0.0, min(pe, target.end) - max(ps, target.start))
    union = (pe - ps) + target.length - inter
    iou_val = inter / union if union > 0 else 0.0
    span = max(pe, target.end) - min(ps, target.start)
    center_gap = (0.5 * (ps + pe) - target.center) / span
    return 1.0 - iou_val + center_gap**2


def student_mil_loss(class_probs: Tensor, video_label: np.ndarray, k: int) -> Tensor:
    """Binary cross-entropy between top-k-pooled class probabilities and the label."""
    k = min(k, class_probs.shape[0])
    video_scores = dn.topk_mean(class_probs, k, axis=0)
    y = video_label.astype(np.float64)
    per_class = -(y * dn.log(video_scores + _LOG_EPS) + (1.0 - y) * dn.log(1.0 - video_scores + _LOG_EPS))
    return per_class.mean()


@dataclass
class EmaState:
    """Shadow copy of the student parameters, decayed toward the live weights."""

    shadow: dict
    alpha: float

    @classmethod
    def create(cls, params: ModelParams, alpha: float) -> "EmaState":
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"EMA decay must lie in [0, 1], got {alpha}")
        return cls(shadow=params.as_arrays(), alpha=alpha)

    def as_params(self) -> ModelParams:
        return ModelParams({n: Tensor(a.copy(), requires_grad=True) for n, a in self.shadow.items()})


def ema_update(ema: EmaState, params: ModelParams) -> EmaState:
    """shadow <- alpha * shadow + (1 - alpha) * student; never writes the student."""
    for name, t in params.items():
        if name not in ema.shadow or ema.shadow[name].shape != t.data.shape:
            raise ContractViolation(f"EMA shadow mismatch for parameter {name!r}")
        s = ema.shadow[name]
        s *= ema.alpha
        s += (1.0 - ema.alpha) * t.data
    return ema


def decode(
    class_logits: np.ndarray,
    offsets: np.ndarray,
    video_id: str,
    score_thresh: float,
    nms_iou: float,
) -> list[Proposal]:
    """Emit [t - l, t + r) per (snippet, class) above the bar, then per-class NMS."""
    t_len = class_logits.shape[0]
    probs = 1.0 / (1.0 + np.exp(-class_logits.astype(np.float64)))
    t_idx, c_idx = np.nonzero(probs >= score_thresh)
    proposals = []
    for t, c in zip(t_idx.tolist(), c_idx.tolist()):
        start = max(0.0, t - float(offsets[t, 0]))
        end = min(float(t_len), t + float(offsets[t, 1]))
        if end <= start:
            continue
        proposals.append(Proposal(video_id, Interval(start, end), int(c), float(probs[t, c])))
    return postprocess.nms(proposals, nms_iou)


def _video_loss(net: StudentNet, video: VideoRecord, targets: SnippetTargets, config: StudentConfig):
    out = net.forward(video.features)
    probs = dn.sigmoid(out.class_logits)
    l_focal = focal_loss(probs, targets)
    pos = targets.positive_indices
    if pos.size > 0:
        tgt = np.stack([pos - targets.offsets[pos, 0], pos + targets.offsets[pos, 1]], axis=1)
        l_diou = diou_loss_batch(pos, dn.gather_rows(out.offsets, pos), tgt)
    else:
        l_diou = Tensor(np.zeros((), dtype=np.float32))
    if config.use_mil:
        l_mil = student_mil_loss(probs, video.label, config.k)
    else:
        l_mil = Tensor(np.zeros((), dtype=np.float32))
    return l_focal + l_diou + l_mil, {
        "focal": l_focal.item(),
        "diou": l_diou.item(),
        "mil": l_mil.item(),
    }


def _train_loop(
    net: StudentNet,
    ema: EmaState,
    dataset: list[VideoRecord],
    pseudo_labels: PseudoLabelSet,
    config: StudentConfig,
    iterations: int,
    rng: np.random.Generator,
) -> list[dict]:
    state = dn.AdamState(lr=config.lr)
    targets = {
        v.id: assign_targets(pseudo_labels.for_video(v.id), v.num_snippets) for v in dataset
    }
    log: list[dict] = []
    for iteration in range(iterations):
        batch_size = min(config.batch, len(dataset))
        batch_idx = rng.choice(len(dataset), size=batch_size, replace=False)
        total = None
        comp = {"focal": 0.0, "diou": 0.0, "mil": 0.0}
        for i in batch_idx:
            video = dataset[int(i)]
            loss, parts = _video_loss(net, video, targets[video.id], config)
            total = loss if total is None else total + loss
            for key in comp:
                comp[key] += parts[key]
        total = total / float(batch_size)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite student loss at iteration {iteration}")
        total.backward()
        dn.adam_step(net.params, state)
        ema_update(ema, net.params)
        log.append(
            {"iteration": iteration, **{k: v / batch_size for k, v in comp.items()}, "total": value}
        )
    return log


def train_student(
    dataset: list[VideoRecord],
    pseudo_labels: PseudoLabelSet,
    config: StudentConfig,
    iterations: int | None = None,
) -> tuple[StudentNet, EmaState, list[dict]]:
    """Supervised phase on the filtered proposals; EMA shadow updated each step."""
    if not dataset:
        raise ContractViolation("train_student needs a non-empty dataset")
    rng = np.random.default_rng(config.seed)
    in_dim = dataset[0].feature_dim
    num_classes = dataset[0].label.shape[0]
    net = StudentNet.create(in_dim, config.embed_dim, num_classes, rng)
    ema = EmaState.create(net.params, config.ema_alpha)
    steps = config.supervised_iterations if iterations is None else iterations
    log = _train_loop(net, ema, dataset, pseudo_labels, config, steps, rng)
    return net, ema, log


def teacher_pseudo_labels(
    ema: EmaState, net_arch: StudentNet, dataset: list[VideoRecord], config: StudentConfig
) -> PseudoLabelSet:
    """Decode every training video with the EMA shadow weights; keep conf >= eta_prime."""
    teacher = StudentNet(
        params=ema.as_params(),
        in_dim=net_arch.in_dim,
        embed_dim=net_arch.embed_dim,
        num_classes=net_arch.num_classes,
        kernel_width=net_arch.kernel_width,
    )
    labels = []
    for video in dataset:
        out = teacher.forward(video.features)
        labels.extend(
            decode(out.class_logits.data, out.offsets.data, video.id, config.eta_prime, config.nms_iou)
        )
    return PseudoLabelSet.from_proposals(labels)


def distill_round(
    student: StudentNet,
    ema: EmaState,
    dataset: list[VideoRecord],
    config: StudentConfig,
    iterations: int | None = None,
) -> tuple[StudentNet, EmaState, PseudoLabelSet, list[dict]]:
    """Late self-distillation: the EMA teacher labels the videos, the student keeps training.

    A video the teacher leaves unlabeled still contributes its background and
    MIL terms.  The EMA shadow keeps updating throughout.  Optimizer moments
    restart for the new phase.
    """
    pseudo = teacher_pseudo_labels(ema, student, dataset, config)
    steps = config.distill_iterations if iterations is None else iterations
    rng = np.random.default_rng(config.seed + 1)
    log = _train_loop(student, ema, dataset, pseudo, config, steps, rng)
    return student, ema, pseudo, log
