"""Proposal-generation stage: MIL-trained temporal classifier with snippet contrast.

The network maps T x D features to a T x C class activation sequence through a
small two-layer temporal conv trunk.  Training combines a top-k MIL
cross-entropy with two InfoNCE terms: an in-video one pulling boundary-region
("hard") snippets toward confidently scored ("easy") snippets of the same
video, and a cross-video one pulling them toward easy snippets of other
batch videos that share a label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import diffnum as dn
from .core import ConfigError, ContractViolation, TrainingError, VideoRecord
from .diffnum import ModelParams, Tensor


@dataclass(frozen=True)
class GenConfig:
    """Generation-stage hyperparameters.

    ``k`` snippets feed both the MIL top-k pooling and the easy sets;
    ``k_hard`` caps each hard set.  ``mask_narrow`` / ``mask_wide`` are the
    two morphology window sizes used to carve boundary regions out of the
    binarized actionness.
    """

    k: int
    k_hard: int
    mask_narrow: int = 3
    mask_wide: int = 6
    tau: float = 0.07
    lambda1: float = 0.01
    lambda2: float = 0.002
    iterations: int = 6000
    lr: float = 1e-4
    batch: int = 16
    binarize_threshold: float = 0.5
    embed_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.k_hard < 1:
            raise ConfigError(f"k and k_hard must be >= 1, got {self.k}, {self.k_hard}")
        if not self.mask_narrow < self.mask_wide:
            raise ConfigError(f"need mask_narrow < mask_wide, got {self.mask_narrow} >= {self.mask_wide}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError(f"binarize_threshold must lie in (0, 1), got {self.binarize_threshold}")

    @classmethod
    def for_length(cls, num_snippets: int, **overrides) -> "GenConfig":
        """Defaults with k = ceil(T/5) and k_hard = ceil(T/20)."""
        overrides.setdefault("k", math.ceil(num_snippets / 5))
        overrides.setdefault("k_hard", math.ceil(num_snippets / 20))
        return cls(**overrides)


@dataclass
class Cas:
    """Class activation sequence: raw T x C logits plus the trunk embeddings."""

    logits: Tensor
    embeddings: Tensor

    @property
    def num_snippets(self) -> int:
        return self.logits.shape[0]


@dataclass
class GeneratorNet:
    params: ModelParams
    in_dim: int
    embed_dim: int
    num_classes: int
    kernel_width: int = 3

    @classmethod
    def create(cls, in_dim: int, embed_dim: int, num_classes: int, rng: np.random.Generator,
               kernel_width: int = 3) -> "GeneratorNet":
        tensors = {}
        tensors["trunk.conv1.weight"], tensors["trunk.conv1.bias"] = _he_pair(
            rng, kernel_width * in_dim, embed_dim
        )
        tensors["trunk.conv2.weight"], tensors["trunk.conv2.bias"] = _he_pair(
            rng, kernel_width * embed_dim, embed_dim
        )
        tensors["head.class.weight"], tensors["head.class.bias"] = _he_pair(rng, embed_dim, num_classes)
        return cls(ModelParams(tensors), in_dim, embed_dim, num_classes, kernel_width)

    def forward(self, features: np.ndarray) -> Cas:
        p = self.params
        x = Tensor(features)
        h = dn.relu(dn.conv1d(x, p["trunk.conv1.weight"], p["trunk.conv1.bias"], self.kernel_width))
        h = dn.relu(dn.conv1d(h, p["trunk.conv2.weight"], p["trunk.conv2.bias"], self.kernel_width))
        logits = dn.affine(h, p["head.class.weight"], p["head.class.bias"])
        return Cas(logits=logits, embeddings=h)

    def arch_meta(self) -> dict:
        return {
            "kind": "generator",
            "in_dim": self.in_dim,
            "embed_dim": self.embed_dim,
            "num_classes": self.num_classes,
            "kernel_width": self.kernel_width,
        }


def _he_pair(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
    weight = Tensor(w.astype(np.float32), requires_grad=True)
    bias = Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True)
    return weight, bias


def compute_cas(video: VideoRecord, net: GeneratorNet) -> Cas:
    if video.feature_dim != net.in_dim:
        raise ContractViolation(
            f"video {video.id!r} feature dim {video.feature_dim} vs network input dim {net.in_dim}"
        )
    return net.forward(video.features)


def mil_loss(cas: Cas, label: np.ndarray, k: int) -> Tensor:
    """Cross-entropy between softmaxed top-k-pooled class scores and the label.

    Per class the video logit is the mean of its k highest snippet scores;
    the multi-hot label is normalized to a distribution.
    """
    if not np.any(label > 0):
        raise ContractViolation("mil_loss needs at least one labeled class")
    if k > cas.num_snippets:
        raise ContractViolation(f"k={k} exceeds snippet count {cas.num_snippets}")
    video_logits = dn.topk_mean(cas.logits, k, axis=0)
    target = (label / label.sum()).astype(np.float64)
    log_probs = video_logits - dn.logsumexp(video_logits)
    return -(log_probs * target).sum()


def actionness(cas: Cas) -> np.ndarray:
    """Per-snippet probability that any action is happening: sigmoid of the class-sum."""
    s = cas.logits.data.sum(axis=1, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-s))


def _window_reduce(mask: np.ndarray, width: int, op, pad_value: int) -> np.ndarray:
    m = np.asarray(mask)
    left = (width - 1) // 2
    right = width - 1 - left
    padded = np.full(m.shape[0] + left + right, pad_value, dtype=m.dtype)
    padded[left : left + m.shape[0]] = m
    windows = np.lib.stride_tricks.sliding_window_view(padded, width)
    return op(windows, axis=1)


def dilate(mask: np.ndarray, width: int) -> np.ndarray:
    """Sliding-window max over [i - floor((w-1)/2), i + ceil((w-1)/2)], zero-padded."""
    if width < 1:
        raise ContractViolation(f"window width must be >= 1, got {width}")
    return _window_reduce(mask, width, np.max, pad_value=0)


def erode(mask: np.ndarray, width: int) -> np.ndarray:
    """Sliding-window min with the same window anchoring, zero-padded."""
    if width < 1:
        raise ContractViolation(f"window width must be >= 1, got {width}")
    return _window_reduce(mask, width, np.min, pad_value=0)


@dataclass(frozen=True)
class MiningSets:
    """Snippet index sets used by the contrastive losses.

    Hard sets come from the morphological boundary rings of the binarized
    actionness (inner ring: hard action, outer ring: hard background); easy
    sets are the top / bottom actionness snippets outside the hard sets.
    """

    hard_action: np.ndarray
    hard_background: np.ndarray
    easy_action: np.ndarray
    easy_background: np.ndarray


def mine_snippets(aness: np.ndarray, config: GenConfig, rng: np.random.Generator) -> MiningSets:
    t_len = aness.shape[0]
    if t_len < config.mask_wide:
        raise ContractViolation(f"need T >= {config.mask_wide}, got T={t_len}")
    mask = (aness > config.binarize_threshold).astype(np.int8)

    inner = erode(mask, config.mask_narrow) - erode(mask, config.mask_wide)
    outer = dilate(mask, config.mask_wide) - dilate(mask, config.mask_narrow)

    def sample(region: np.ndarray) -> np.ndarray:
        candidates = np.flatnonzero(region)
        if candidates.size == 0:
            return np.empty(0, dtype=np.intp)
        take = min(config.k_hard, candidates.size)
        return np.sort(rng.choice(candidates, size=take, replace=False)).astype(np.intp)

    hard_action = sample(inner)
    hard_background = sample(outer)

    excluded = np.zeros(t_len, dtype=bool)
    excluded[hard_action] = True
    excluded[hard_background] = True
    order = np.argsort(-aness, kind="stable")
    remaining = order[~excluded[order]]
    k = min(config.k, remaining.size)
    easy_action = np.sort(remaining[:k]).astype(np.intp)
    easy_background = np.sort(remaining[remaining.size - k :]).astype(np.intp)
    return MiningSets(hard_action, hard_background, easy_action, easy_background)


def infonce(query: Tensor, positives: Tensor, negatives: Tensor, tau: float) -> Tensor:
    """InfoNCE for one query over positive rows and a shared negative pool.

    All embeddings are L2-normalized before the dot products.  Returns the
    mean over positives of -log(exp(s+/tau) / (exp(s+/tau) + sum exp(s-/tau)));
    an empty positive or negative pool contributes zero.
    """
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        return Tensor(np.zeros((), dtype=query.data.dtype))
    q = dn.l2_normalize(query.reshape(1, -1))
    return _infonce_many(q, positives, negatives, tau)


def _infonce_many(queries_norm: Tensor, positives: Tensor, negatives: Tensor, tau: float) -> Tensor:
    pos = dn.l2_normalize(positives)
    neg = dn.l2_normalize(negatives)
    s_pos = dn.matmul(queries_norm, dn.transpose(pos)) / tau  # H x P
    s_neg = dn.matmul(queries_norm, dn.transpose(neg)) / tau  # H x N
    lse_neg = dn.logsumexp(s_neg, axis=1, keepdims=True)  # H x 1
    per_pair = dn.logaddexp(s_pos, lse_neg) - s_pos
    return per_pair.mean(axis=1).mean()


def _contrast_pair(embeddings_q: Tensor, queries: np.ndarray, embeddings_a: Tensor,
                   positives: np.ndarray, negatives: np.ndarray, tau: float) -> Tensor | None:
    if queries.size == 0 or positives.size == 0 or negatives.size == 0:
        return None
    q = dn.l2_normalize(dn.gather_rows(embeddings_q, queries))
    return _infonce_many(q, dn.gather_rows(embeddings_a, positives), dn.gather_rows(embeddings_a, negatives), tau)


def in_video_loss(embeddings: Tensor, sets: MiningSets, tau: float) -> Tensor:
    """Hard action snippets contrast against easy action vs. easy background, and vice versa."""
    total = Tensor(np.zeros((), dtype=embeddings.data.dtype))
    first = _contrast_pair(embeddings, sets.hard_action, embeddings, sets.easy_action, sets.easy_background, tau)
    if first is not None:
        total = total + first
    second = _contrast_pair(embeddings, sets.hard_background, embeddings, sets.easy_background, sets.easy_action, tau)
    if second is not None:
        total = total + second
    return total


@dataclass
class MinedVideo:
    """One video's forward pass plus its mined snippet sets for the current step."""

    record: VideoRecord
    cas: Cas
    sets: MiningSets


def cross_video_loss(p: MinedVideo, q: MinedVideo, tau: float) -> Tensor:
    """Hard snippets of video p contrast against easy anchors mined in video q.

    Class-agnostic: snippets are not partitioned by category, the pairing
    only requires the two videos to share at least one label.
    """
    if not np.any((p.record.label > 0) & (q.record.label > 0)):
        raise ContractViolation(
            f"cross-video pair {p.record.id!r}/{q.record.id!r} shares no label class"
        )
    total = Tensor(np.zeros((), dtype=p.cas.embeddings.data.dtype))
    first = _contrast_pair(p.cas.embeddings, p.sets.hard_action,
                           q.cas.embeddings, q.sets.easy_action, q.sets.easy_background, tau)
    if first is not None:
        total = total + first
    second = _contrast_pair(p.cas.embeddings, p.sets.hard_background,
                            q.cas.embeddings, q.sets.easy_background, q.sets.easy_action, tau)
    if second is not None:
        total = total + second
    return total


def total_loss(items: list[MinedVideo], config: GenConfig) -> tuple[Tensor, dict]:
    """Mean over batch videos of MIL + lambda1 * in-video + lambda2 * mean cross-video."""
    per_video = []
    comp = {"mil": 0.0, "in_video": 0.0, "cross_video": 0.0}
    for p in items:
        l_mil = mil_loss(p.cas, p.record.label, config.k)
        l_iv = in_video_loss(p.cas.embeddings, p.sets, config.tau)
        partners = [
            q for q in items
            if q is not p and np.any((p.record.label > 0) & (q.record.label > 0))
        ]
        if partners and config.lambda2 != 0.0:
            l_cv = cross_video_loss(p, partners[0], config.tau)
            for q in partners[1:]:
                l_cv = l_cv + cross_video_loss(p, q, config.tau)
            l_cv = l_cv / float(len(partners))
        else:
            l_cv = Tensor(np.zeros((), dtype=np.float32))
        per_video.append(l_mil + config.lambda1 * l_iv + config.lambda2 * l_cv)
        comp["mil"] += l_mil.item()
        comp["in_video"] += l_iv.item()
        comp["cross_video"] += l_cv.item()
    total = per_video[0]
    for term in per_video[1:]:
        total = total + term
    total = total / float(len(items))
    for key in comp:
        comp[key] /= len(items)
    comp["total"] = total.item()
    return total, comp


def train_generator(dataset: list[VideoRecord], config: GenConfig) -> tuple[GeneratorNet, list[dict]]:
    """Seeded minibatch Adam on the combined loss; returns the net and per-iteration log."""
    if not dataset:
        raise ContractViolation("train_generator needs a non-empty dataset")
    rng = np.random.default_rng(config.seed)
    in_dim = dataset[0].feature_dim
    num_classes = dataset[0].label.shape[0]
    net = GeneratorNet.create(in_dim, config.embed_dim, num_classes, rng)
    state = dn.AdamState(lr=config.lr)
    log: list[dict] = []
    for iteration in range(config.iterations):
        batch_size = min(config.batch, len(dataset))
        batch_idx = rng.choice(len(dataset), size=batch_size, replace=False)
        items = []
        for i in batch_idx:
            video = dataset[int(i)]
            cas = compute_cas(video, net)
            sets = mine_snippets(actionness(cas), config, rng)
            items.append(MinedVideo(video, cas, sets))
        loss, comp = total_loss(items, config)
        if not math.isfinite(comp["total"]):
            raise TrainingError(f"non-finite generator loss at iteration {iteration}")
        loss.backward()
        dn.adam_step(net.params, state)
        log.append({"iteration": iteration, **comp})
    return net, log
