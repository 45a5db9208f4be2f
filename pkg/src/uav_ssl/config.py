"""Experiment config: one JSON file with model / mask / loss / train / eval / synth sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .masking import MaskConfig
from .model import ModelConfig


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float | None = 1.0
    seed: int = 0
    checkpoint_every: int = 100
    log_every: int = 1

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("train.steps must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 (contrastive loss needs a negative)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be > 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("train.checkpoint_every and train.log_every must be >= 1")


@dataclass
class EvalConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0


@dataclass
class SynthSpec:
    n_speakers: int = 8
    samples_per_speaker: int = 8
    n_eval_speakers: int = 4
    eval_samples_per_speaker: int = 8
    latent_dim: int = 16
    noise_std: float = 0.5
    pixel_noise_std: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_speakers < 1 or self.samples_per_speaker < 1 or self.latent_dim < 1:
            raise ConfigError("synth.n_speakers, synth.samples_per_speaker and synth.latent_dim must be >= 1")
        if self.noise_std < 0 or self.pixel_noise_std < 0:
            raise ConfigError("synth noise levels must be >= 0")


SECTIONS = {"model": ModelConfig, "mask": MaskConfig, "loss": LossConfig,
            "train": TrainConfig, "eval": EvalConfig, "synth": SynthSpec}
# JSON key -> dataclass field, where the two differ
_ALIASES = {("loss", "lambda"): "lam"}
_TUPLE_FIELDS = {("model", "grid_visual"), ("model", "grid_audio"), ("train", "betas")}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def validate(self) -> ExperimentConfig:
        self.model.validate()
        self.mask.validate()
        self.loss.validate()
        self.train.validate()
        self.synth.validate()
        return self

    def to_dict(self) -> dict:
        out = {}
        for section in SECTIONS:
            d = asdict(getattr(self, section))
            for (sec, key), attr in _ALIASES.items():
                if sec == section:
                    d[key] = d.pop(attr)
            for sec, key in _TUPLE_FIELDS:
                if sec == section and d[key] is not None:
                    d[key] = list(d[key])
            out[section] = d
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        parts = {}
        for section, kind in SECTIONS.items():
            values = raw.get(section, {})
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            names = {f.name for f in fields(kind)}
            kwargs = {}
            for key, val in values.items():
                attr = _ALIASES.get((section, key), key)
                if attr not in names:
                    raise ConfigError(f"unknown config key {section}.{key}")
                if (section, attr) in _TUPLE_FIELDS and val is not None:
                    val = tuple(val)
                kwargs[attr] = val
            try:
                parts[section] = kind(**kwargs)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value in section {section!r}: {exc}") from exc
        return cls(**parts).validate()

    def with_overrides(self, overrides: list[str]) -> ExperimentConfig:
        """Apply ``section.key=value`` strings; values parse as JSON, else as plain strings."""
        raw = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            path, value = item.split("=", 1)
            if "." not in path:
                raise ConfigError(f"override key {path!r} must be section.key")
            section, key = path.split(".", 1)
            if section not in raw:
                raise ConfigError(f"unknown config section: {section}")
            if key not in raw[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            try:
                raw[section][key] = json.loads(value)
            except json.JSONDecodeError:
                raw[section][key] = value
        return ExperimentConfig.from_dict(raw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(raw)
