"""Experiment configuration: a versioned YAML document validated before any compute."""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .baselines import METHODS, BaselineSpec
from .losses import LossWeights
from .models import ArchitectureBlueprint, format_fraction, parse_fraction
from .pipeline import StagePlan

SCHEMA = "sdakd-config-v1"


class ConfigError(ValueError):
    pass


def _fraction(value) -> str:
    return format_fraction(parse_fraction(value))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SplitCounts(_Section):
    train: int = Field(512, ge=1)
    validation: int = Field(64, ge=1)
    test: int = Field(64, ge=1)


class DatasetSection(_Section):
    source: str = "synthetic"  # "synthetic" or a directory of PNG/JPEG images
    size: int = Field(64, ge=4)
    scale: Literal[2, 4] = 4
    seed: int = 0
    splits: SplitCounts = SplitCounts()

    @model_validator(mode="after")
    def _divisible(self):
        if self.size % self.scale:
            raise ValueError(f"size {self.size} must be divisible by scale {self.scale}")
        return self

    @property
    def count(self) -> int:
        return self.splits.train + self.splits.validation + self.splits.test


class ArchitectureSection(_Section):
    generator_widths: list[int] = [64, 32, 16]
    discriminator_widths: list[int] = [64, 128, 128]
    residual_blocks: int = Field(4, ge=1)
    image_skip: bool = True
    fractions: list[str] = ["1/2", "1/4", "1/8"]

    _normalise = field_validator("fractions", mode="before")(lambda cls, v: [_fraction(f) for f in v])


class TrainingSection(_Section):
    n1: int = Field(5, ge=0)
    n2: int = Field(5, ge=0)
    n3: int = Field(5, ge=0)
    learning_rate: float = Field(2e-4, gt=0)
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = Field(4, ge=1)
    seed: int = 0
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(0.1, ge=0)
    gt_l1: bool = False


class BaselineEntry(_Section):
    method: str
    generator_fraction: str = "1/2"
    discriminator_fraction: str = "1"

    _normalise = field_validator("generator_fraction", "discriminator_fraction", mode="before")(
        lambda cls, v: _fraction(v)
    )

    @field_validator("method")
    @classmethod
    def _known(cls, v: str) -> str:
        if v not in METHODS:
            raise ValueError(f"unknown method {v!r}; expected one of {', '.join(METHODS)}")
        return v


class MethodsSection(_Section):
    sdakd: bool = True
    baselines: list[BaselineEntry] = []


class EvaluationSection(_Section):
    diag_samples: int = Field(100, ge=1)
    histogram_bins: int = Field(20, ge=1)
    speed_passes: int = Field(50, ge=1)
    speed_warmup: int = Field(5, ge=0)
    extractor_seed: int = 0


class ExperimentConfig(_Section):
    schema_version: Literal["sdakd-config-v1"] = Field(SCHEMA, alias="schema")
    dataset: DatasetSection = DatasetSection()
    architecture: ArchitectureSection = ArchitectureSection()
    training: TrainingSection = TrainingSection()
    methods: MethodsSection = MethodsSection()
    evaluation: EvaluationSection = EvaluationSection()

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def blueprint(self) -> ArchitectureBlueprint:
        a = self.architecture
        return ArchitectureBlueprint(
            base_channel_widths=tuple(a.generator_widths),
            num_residual_blocks=a.residual_blocks,
            upscale_factor=self.dataset.scale,
            disc_channel_widths=tuple(a.discriminator_widths),
            image_skip=a.image_skip,
        )

    def plan(self, seed: Optional[int] = None) -> StagePlan:
        t = self.training
        return StagePlan(t.n1, t.n2, t.n3, t.learning_rate, t.betas, t.batch_size, t.seed if seed is None else seed)

    def weights(self) -> LossWeights:
        return LossWeights(self.training.lambda1, self.training.lambda2)

    def baseline_spec(self, method: str, generator_fraction, discriminator_fraction, seed: Optional[int] = None) -> BaselineSpec:
        return BaselineSpec(method, Fraction(generator_fraction), Fraction(discriminator_fraction), self.plan(seed), self.weights())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json", by_alias=True), sort_keys=False)


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data: Union[dict, None]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)
