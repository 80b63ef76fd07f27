"""JSON run configuration: one document covering data, model, optimizer,
privacy, PPO, evaluation and sweep settings.

Precedence, lowest to highest: built-in defaults, the config file, then
command-line flags (applied through :func:`apply_overrides`).
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .alignment_pipeline import PIPELINE_PHASES, PipelineSpec, PPOSettings, make_pipeline_spec
from .dp_optimizers import DPOptimizerConfig
from .evaluation import EvalSettings
from .models import ModelConfig
from .privacy_accounting import PrivacyBudget, format_epsilon, parse_epsilon


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violation as "path: message"."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid configuration:\n" + "\n".join(f"  {e}" for e in errors))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _epsilon(value: Any) -> float:
    if isinstance(value, bool):
        raise ValueError("epsilon must be a number, 'inf' or 'zero'")
    eps = parse_epsilon(value) if isinstance(value, str) else float(value)
    if math.isnan(eps) or eps < 0:
        raise ValueError("epsilon must be >= 0 or 'inf'")
    return eps


class PrivacySection(_Section):
    epsilon: float = math.inf
    delta: float = Field(1e-5, gt=0, lt=1)
    pure_noise_sigma: float = Field(1.0, gt=0)

    _eps = field_validator("epsilon", mode="before")(_epsilon)


class OptimizerSection(_Section):
    variant: Literal["dp_sgd", "dp_adam", "dp_adamw"] = "dp_adamw"
    learning_rate: float = Field(5e-5, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    clip_norm: float = Field(0.1, gt=0)
    denom_epsilon: float = Field(1e-8, gt=0)
    clipping_mode: Literal["batch", "per_sample"] = "batch"

    def build(self) -> DPOptimizerConfig:
        return DPOptimizerConfig(**self.model_dump())


class PhaseOverride(_Section):
    optimizer: dict[str, Any] = Field(default_factory=dict)
    epochs: int | None = Field(None, ge=1)
    batch_size: int | None = Field(None, ge=1)

    @field_validator("optimizer")
    @classmethod
    def _known_optimizer_keys(cls, value: dict) -> dict:
        unknown = set(value) - set(OptimizerSection.model_fields)
        if unknown:
            raise ValueError(f"unknown optimizer keys {sorted(unknown)}")
        OptimizerSection(**value)
        return value

    def as_dict(self) -> dict:
        out: dict[str, Any] = {}
        if self.optimizer:
            out["optimizer"] = dict(self.optimizer)
        if self.epochs is not None:
            out["epochs"] = self.epochs
        if self.batch_size is not None:
            out["batch_size"] = self.batch_size
        return out


class TrainingSection(_Section):
    epochs: int = Field(3, ge=1)
    batch_size: int = Field(32, ge=1)
    partition_fractions: list[float] | None = None
    phase_overrides: dict[Literal["sft", "dpo", "rm", "ppo"], PhaseOverride] = Field(default_factory=dict)

    @field_validator("partition_fractions")
    @classmethod
    def _fractions(cls, value):
        if value is None:
            return value
        if any(not f > 0 for f in value):
            raise ValueError("fractions must be positive")
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(value)}")
        return value


class ModelSection(_Section):
    vocab_size: int = Field(16, ge=2, le=64)
    context_window: int = Field(16, ge=2, le=32)
    embed_dim: int = Field(8, ge=1)
    hidden_dim: int = Field(32, ge=1)
    n_hidden_layers: Literal[1, 2] = 1

    def build(self) -> ModelConfig:
        return ModelConfig(**self.model_dump())


class PPOSection(_Section):
    gamma: float = Field(0.99, ge=0, le=1)
    gae_lambda: float = Field(0.95, ge=0, le=1)
    clip_eps: float = Field(0.2, gt=0, lt=1)
    rollout_batch: int = Field(64, ge=1)
    max_response_len: int = Field(8, ge=1)
    value_coef: float = Field(0.5, ge=0)
    temperature: float = Field(1.0, gt=0)

    def build(self) -> PPOSettings:
        return PPOSettings(**self.model_dump())


class DataSection(_Section):
    path: str | None = None
    n: int = Field(8000, ge=1)
    vocab: int = Field(16, ge=2, le=64)
    seed: int = 0
    prompt_len: int = Field(3, ge=1)
    response_len: int = Field(4, ge=1)
    base_scale: float = 1.0
    prompt_scale: float = 0.5


class EvaluationSection(_Section):
    n_prompts: int = Field(300, ge=1)
    n_samples: int = Field(1000, ge=1)
    temperature: float = Field(1.0, gt=0)
    seed: int = 12345

    def build(self) -> EvalSettings:
        return EvalSettings(**self.model_dump())


class SweepSection(_Section):
    epsilons: list[float] = Field(default_factory=lambda: [0.0, 1, 2, 3, 4, 5, 10, math.inf])
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = Field(1, ge=1)

    @field_validator("epsilons", mode="before")
    @classmethod
    def _parse(cls, value):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return [_epsilon(v) for v in value]

    @field_validator("epsilons", "seeds")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("must be nonempty")
        return value


class RunConfig(_Section):
    pipeline: Literal["dpo_pipeline", "rlhf_pipeline"] = "dpo_pipeline"
    seed: int = 0
    privacy: PrivacySection = PrivacySection()
    optimizer: OptimizerSection = OptimizerSection()
    training: TrainingSection = TrainingSection()
    model: ModelSection = ModelSection()
    ppo: PPOSection = PPOSection()
    data: DataSection = DataSection()
    evaluation: EvaluationSection = EvaluationSection()
    sweep: SweepSection = SweepSection()

    @model_validator(mode="after")
    def _consistent(self):
        phases = PIPELINE_PHASES[self.pipeline]
        fr = self.training.partition_fractions
        if fr is not None and len(fr) != len(phases):
            raise ValueError(f"training.partition_fractions needs {len(phases)} entries for {self.pipeline}")
        stray = set(self.training.phase_overrides) - set(phases)
        if stray:
            raise ValueError(f"training.phase_overrides names phases not in {self.pipeline}: {sorted(stray)}")
        if self.data.vocab > self.model.vocab_size:
            raise ValueError("data.vocab exceeds model.vocab_size")
        if self.data.prompt_len + self.data.response_len > self.model.context_window:
            raise ValueError("data.prompt_len + data.response_len exceeds model.context_window")
        if self.pipeline == "rlhf_pipeline" and self.data.prompt_len + self.ppo.max_response_len > self.model.context_window:
            raise ValueError("data.prompt_len + ppo.max_response_len exceeds model.context_window")
        return self

    # -- conversions

    def budget(self) -> PrivacyBudget:
        return PrivacyBudget(self.privacy.epsilon, self.privacy.delta)

    def pipeline_spec(self) -> PipelineSpec:
        return make_pipeline_spec(
            self.pipeline,
            self.optimizer.build(),
            self.budget(),
            epochs=self.training.epochs,
            batch_size=self.training.batch_size,
            seed=self.seed,
            model=self.model.build(),
            ppo=self.ppo.build(),
            partition_fractions=self.training.partition_fractions,
            pure_noise_sigma=self.privacy.pure_noise_sigma,
            phase_overrides={k: v.as_dict() for k, v in self.training.phase_overrides.items()},
        )

    def to_json(self) -> dict:
        d = self.model_dump(mode="python")
        d["privacy"]["epsilon"] = format_epsilon(self.privacy.epsilon)
        d["sweep"]["epsilons"] = [format_epsilon(e) for e in self.sweep.epsilons]
        return d


def _error_lines(exc: ValidationError) -> list[str]:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"].removeprefix("Value error, ")
        lines.append(f"{path}: {msg}")
    return lines


def validate_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_error_lines(exc)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}"]) from None
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return validate_config(data)


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Set dotted keys (``"privacy.epsilon"``) and revalidate the whole document."""
    data = config.model_dump(mode="python")
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        node[leaf] = value
    return validate_config(data)
