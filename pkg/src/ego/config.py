"""Engine configuration: one nested YAML file, validated on load."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .composition import CCConfig
from .text_energy import TextEnergyConfig

__all__ = ["EngineConfig", "ConfigError", "load_config", "dump_config", "ValidationError"]


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True, allow_inf_nan=False)


class DiffusionSection(_Section):
    T: int = Field(1000, ge=1, le=100_000)
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(2e-2, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _betas(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class ScheduleSection(_Section):
    steps: int = Field(50, ge=2)
    t_hi: int = Field(980, ge=1)
    t_lo: int = Field(20, ge=0)
    order: Literal["descending", "ascending", "random"] = "descending"

    @model_validator(mode="after")
    def _range(self):
        if self.t_hi <= self.t_lo:
            raise ValueError("t_hi must exceed t_lo")
        if self.steps > self.t_hi - self.t_lo + 1:
            raise ValueError("more steps than distinct timesteps in [t_lo, t_hi]")
        return self


class TextSection(_Section):
    omega: float = Field(7.5, ge=0.0, le=100.0)
    lambda_neg: float = Field(0.3, ge=0.0, le=1.0)
    share_noise: bool = True
    eta: float = Field(1.0, ge=0.0)
    truncate: bool = True
    cutoff: Optional[int] = Field(None, ge=0)


class ImageSection(_Section):
    enabled: bool = True
    # the matched distance is a sum over points and channels; 0.01 brings it to the text term's scale
    eta: float = Field(0.01, ge=0.0)
    t_switch: int = Field(600, ge=0)
    tap: Literal["dec3", "dec2", "dec1"] = "dec2"
    metric: Literal["euclidean", "cosine"] = "euclidean"
    condition: Literal["reference", "unconditional"] = "reference"
    smooth_sigma: float = Field(3.0, gt=0.0, le=64.0)
    smooth_radius: int = Field(6, ge=0, le=64)


class CompositionSection(_Section):
    enabled: bool = True
    t_start: int = Field(600, ge=0)
    t_stop: int = Field(500, ge=0)
    interval: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _window(self):
        if self.t_start <= self.t_stop:
            raise ValueError("t_start must exceed t_stop")
        return self


class OptimizerSection(_Section):
    step_size: float = Field(2.0, gt=0.0, le=1e3)
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    weighting: Literal["constant", "sds"] = "sds"


class EvalSection(_Section):
    t: int = Field(200, ge=0)
    tap: Literal["dec3", "dec2", "dec1"] = "dec2"
    seed: int = Field(1234, ge=0)


class EngineConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**63)
    diffusion: DiffusionSection = DiffusionSection()
    schedule: ScheduleSection = ScheduleSection()
    text: TextSection = TextSection()
    image: ImageSection = ImageSection()
    composition: CompositionSection = CompositionSection()
    optimizer: OptimizerSection = OptimizerSection()
    eval: EvalSection = EvalSection()

    @model_validator(mode="after")
    def _within_T(self):
        T = self.diffusion.T
        checks = {
            "schedule.t_hi": self.schedule.t_hi,
            "image.t_switch": self.image.t_switch,
            "composition.t_start": self.composition.t_start,
            "eval.t": self.eval.t,
        }
        if self.text.cutoff is not None:
            checks["text.cutoff"] = self.text.cutoff
        for key, val in checks.items():
            if val >= T:
                raise ValueError(f"{key}={val} must be below diffusion.T={T}")
        return self

    @property
    def text_energy(self) -> TextEnergyConfig:
        return TextEnergyConfig(self.text.omega, self.text.lambda_neg, self.text.share_noise)

    @property
    def cc(self) -> CCConfig:
        c = self.composition
        return CCConfig(c.t_start, c.t_stop, c.interval, c.enabled)

    def with_overrides(self, **dotted: Any) -> "EngineConfig":
        """Copy with ``section.key=value`` overrides, re-validated."""
        data = self.model_dump()
        for key, val in dotted.items():
            node = data
            parts = key.replace("__", ".").split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = val
        return from_dict(data)


def from_dict(data: dict) -> EngineConfig:
    try:
        return EngineConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> EngineConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data)


def dump_config(cfg: EngineConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=False)
