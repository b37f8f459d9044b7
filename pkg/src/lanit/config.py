"""Run configuration: nested dataclasses loaded from YAML with strict key checking."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from lanit.errors import ConfigError

# Templates used for text augmentation; "{dataset}" is the dataset word
# (e.g. "face"), the candidate domain is appended after the template.
AUGMENTATION_TEMPLATES = [
    "a {dataset} photo with",
    "a {dataset} photo of the",
    "the {dataset} photo of the",
    "a good {dataset} photo of the",
    "high quality {dataset} photo of",
    "a {dataset} image of",
    "the {dataset} image of",
    "high quality {dataset} image of",
    "a high quality {dataset} image of",
]


@dataclass
class EmbedderConfig:
    kind: str = "mock"
    weights: str | None = None
    device: str = "cpu"
    cache: str | None = None
    # mock-only settings
    k: int = 512
    registry: dict = field(default_factory=dict)
    registry_file: str | None = None
    concepts: list = field(default_factory=list)
    context: str = ""
    noise: float = 0.0
    seed: int = 0

    def validate(self):
        if self.kind not in ("mock", "reference"):
            raise ConfigError(f"embedder.kind must be 'reference' or 'mock', got {self.kind!r}")
        if self.kind == "reference" and not self.weights:
            raise ConfigError("embedder.weights is required for the reference embedder")


@dataclass
class LabelingConfig:
    template: str = "a photo of"
    domains: list = field(default_factory=list)
    mode: str = "adaptive"
    K: int = 1
    augment: bool = False
    dataset_word: str = ""
    augmentation_templates: list = field(default_factory=lambda: list(AUGMENTATION_TEMPLATES))

    def validate(self):
        if self.mode not in ("adaptive", "topk"):
            raise ConfigError(f"labeling.mode must be 'adaptive' or 'topk', got {self.mode!r}")
        if self.domains:
            if len(set(self.domains)) != len(self.domains):
                raise ConfigError("labeling.domains contains duplicates")
            if self.mode == "topk" and not 1 <= self.K <= len(self.domains):
                raise ConfigError(f"labeling.K must be in [1, {len(self.domains)}], got {self.K}")
        if self.augment and not self.augmentation_templates:
            raise ConfigError("labeling.augment is set but no augmentation_templates are given")

    def templates(self) -> list[str]:
        if not self.augment:
            return [self.template]
        word = self.dataset_word
        return [" ".join(t.replace("{dataset}", word).split()) for t in self.augmentation_templates]


@dataclass
class ArchConfig:
    image_size: int = 256
    style_dim: int = 64
    latent_dim: int = 16
    base_channels: int = 64
    max_channels: int = 512
    mapping_hidden: int = 512
    # content code is image_size / 2**content_downsamples on a side
    content_downsamples: int = 4

    def validate(self):
        if self.image_size < 16 or self.image_size & (self.image_size - 1):
            raise ConfigError("arch.image_size must be a power of two >= 16")
        if self.content_downsamples < 1 or self.image_size >> self.content_downsamples < 2:
            raise ConfigError("arch.content_downsamples must leave a content code of at least 2x2")
        for name in ("style_dim", "latent_dim", "base_channels", "max_channels", "mapping_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"arch.{name} must be positive")


@dataclass
class LossWeights:
    adv: float = 1.0
    dl: float = 1.0
    cyc: float = 1.0
    sty: float = 1.0
    ds: float = 1.0
    r1: float = 1.0
    tau: float = 0.07
    ds_decay_iters: int = 0
    dl_to_generator: bool = True
    dl_to_prompt: bool = True

    def validate(self):
        for name in ("adv", "dl", "cyc", "sty", "ds", "r1"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be non-negative")
        if self.tau <= 0:
            raise ConfigError("loss.tau must be positive")


@dataclass
class TrainConfig:
    iterations: int = 100_000
    batch_size: int = 8
    lr_main: float = 1e-4
    lr_prompt: float = 1e-6
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    lr_step_size: int = 0
    lr_gamma: float = 0.5
    prompt_learning_start_iter: int | None = None
    seed: int = 0
    log_interval: int = 1
    checkpoint_interval: int = 10_000
    sample_interval: int = 1_000
    ema: bool = True
    ema_decay: float = 0.999

    def validate(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("train.iterations and train.batch_size must be positive")
        if self.lr_main <= 0 or self.lr_prompt <= 0:
            raise ConfigError("learning rates must be positive")
        if self.prompt_learning_start_iter is not None and not 0 <= self.prompt_learning_start_iter <= self.iterations:
            raise ConfigError("train.prompt_learning_start_iter must lie in [0, iterations]")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("train.ema_decay must lie in [0, 1)")

    @property
    def prompt_start(self) -> int:
        if self.prompt_learning_start_iter is None:
            return int(0.6 * self.iterations)
        return self.prompt_learning_start_iter


@dataclass
class RunConfig:
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def from_dict(cls, data, where: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        sub = f"{where}.{key}" if where else key
        if _is_dataclass_type(tp):
            kwargs[key] = from_dict(tp, value, sub)
        else:
            kwargs[key] = _coerce(tp, value, sub)
    return cls(**kwargs)


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if tp is list or origin is list:
        if isinstance(value, str):
            return [s.strip() for s in value.split(",") if s.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return list(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return dict(value)
    return value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {p} is not valid YAML: {e}") from None
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return from_dict(RunConfig, data).validate()


def config_from_dict(data: dict) -> RunConfig:
    return from_dict(RunConfig, data).validate()
