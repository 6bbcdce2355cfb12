"""Pipeline configuration: one JSON file drives every stage.

The ``hyperparameters`` section is a flat block of the method-level knobs
(k, k_hard, M, m, tau, lambda1, lambda2, gamma, eta, eta_prime, alpha,
theta_b); k and k_hard may be null to derive them from the video length as
ceil(T/5) and ceil(T/20).  Engineering knobs live in per-stage sections.
Artifacts record a SHA-256 hash of the canonical config alongside the seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .core import ConfigError
from .dataio import SynthConfig
from .generator import GenConfig
from .student import StudentConfig


@dataclass(frozen=True)
class Hyperparams:
    M: int = 6
    m: int = 3
    tau: float = 0.07
    lambda1: float = 0.01
    lambda2: float = 0.002
    gamma: float = 0.2
    eta: float = 0.4
    eta_prime: float = 0.4
    alpha: float = 0.999
    theta_b: float = 0.5
    k: int | None = None
    k_hard: int | None = None


@dataclass(frozen=True)
class DataSection:
    num_videos: int = 50
    num_classes: int = 5
    num_snippets: int = 200
    feature_dim: int = 16
    actions_per_video: tuple[int, int] = (1, 3)
    action_length: tuple[int, int] = (25, 50)
    noise_sigma: float = 0.25
    confusable_prob: float = 0.5


@dataclass(frozen=True)
class GeneratorSection:
    iterations: int = 6000
    lr: float = 1e-4
    batch: int = 16
    embed_dim: int = 256


@dataclass(frozen=True)
class StudentSection:
    iterations: int = 6000
    lr: float = 1e-4
    batch: int = 16
    embed_dim: int = 256
    distill_fraction: float = 1.0 / 3.0
    use_mil: bool = True
    score_thresh: float = 0.1
    nms_iou: float = 0.5


@dataclass(frozen=True)
class PostprocessSection:
    thresholds: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    min_len: int = 2
    merge_gap: int = 1
    class_keep: float = 0.1
    nms_pseudo: float = 0.9
    nms_infer: float = 0.5


_SECTION_TYPES = {
    "data": DataSection,
    "hyperparameters": Hyperparams,
    "generator": GeneratorSection,
    "student": StudentSection,
    "postprocess": PostprocessSection,
}

_TUPLE_FIELDS = {"actions_per_video", "action_length", "thresholds"}


def _build_section(name: str, cls, obj) -> object:
    if not isinstance(obj, dict):
        raise ConfigError(f"config section {name!r} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in obj:
        if key not in known:
            raise ConfigError(f"unknown config field {name}.{key}")
    kwargs = {}
    for key, value in obj.items():
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"config field {name}.{key} must be an array")
            value = tuple(value)
        if isinstance(value, bool) and key != "use_mil":
            raise ConfigError(f"config field {name}.{key} must be a number")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from exc


@dataclass(frozen=True)
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    hyperparameters: Hyperparams = field(default_factory=Hyperparams)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    student: StudentSection = field(default_factory=StudentSection)
    postprocess: PostprocessSection = field(default_factory=PostprocessSection)

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config root must be a JSON object")
        for key in obj:
            if key not in _SECTION_TYPES:
                raise ConfigError(f"unknown config section {key!r}")
        sections = {
            name: _build_section(name, typ, obj.get(name, {}))
            for name, typ in _SECTION_TYPES.items()
        }
        return cls(**sections)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTION_TYPES}

    def canonical_json(self) -> str:
        def default(o):
            if isinstance(o, tuple):
                return list(o)
            raise TypeError(type(o))

        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=default)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]

    def derived_k(self, num_snippets: int) -> int:
        return self.hyperparameters.k if self.hyperparameters.k is not None else math.ceil(num_snippets / 5)

    def derived_k_hard(self, num_snippets: int) -> int:
        return (
            self.hyperparameters.k_hard
            if self.hyperparameters.k_hard is not None
            else math.ceil(num_snippets / 20)
        )

    def synth_config(self, seed: int) -> SynthConfig:
        d = self.data
        return SynthConfig(
            num_videos=d.num_videos,
            num_classes=d.num_classes,
            num_snippets=d.num_snippets,
            feature_dim=d.feature_dim,
            actions_per_video=d.actions_per_video,
            action_length=d.action_length,
            noise_sigma=d.noise_sigma,
            confusable_prob=d.confusable_prob,
            seed=seed,
        )

    def gen_config(self, num_snippets: int, seed: int, **overrides) -> GenConfig:
        h = self.hyperparameters
        g = self.generator
        kwargs = dict(
            k=self.derived_k(num_snippets),
            k_hard=self.derived_k_hard(num_snippets),
            mask_narrow=h.m,
            mask_wide=h.M,
            tau=h.tau,
            lambda1=h.lambda1,
            lambda2=h.lambda2,
            iterations=g.iterations,
            lr=g.lr,
            batch=g.batch,
            binarize_threshold=h.theta_b,
            embed_dim=g.embed_dim,
            seed=seed,
        )
        kwargs.update(overrides)
        return GenConfig(**kwargs)

    def student_config(self, num_snippets: int, seed: int, **overrides) -> StudentConfig:
        h = self.hyperparameters
        s = self.student
        kwargs = dict(
            k=self.derived_k(num_snippets),
            iterations=s.iterations,
            lr=s.lr,
            batch=s.batch,
            embed_dim=s.embed_dim,
            ema_alpha=h.alpha,
            eta_prime=h.eta_prime,
            distill_fraction=s.distill_fraction,
            use_mil=s.use_mil,
            score_thresh=s.score_thresh,
            nms_iou=s.nms_iou,
            seed=seed,
        )
        kwargs.update(overrides)
        return StudentConfig(**kwargs)
