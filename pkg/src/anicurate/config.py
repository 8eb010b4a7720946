"""Pipeline configuration: one JSON file drives every CLI stage.

Unknown keys are rejected at every nesting level so typos fail loudly.
Defaults below are the single source of truth and are documented in the
README. Provider endpoints can be overridden per role with
ANICURATE_PROVIDER_<ROLE> environment variables (CAPTION, EMBED, CHAR,
SMOOTHNESS).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import analysis
from .curation import FilterRule
from .providers import DEFAULT_RETRIES, DEFAULT_TIMEOUT_SECONDS, Provider, resolve_endpoint

PROVIDER_ROLES = ("caption", "embed", "char", "smoothness")
ENV_PREFIX = "ANICURATE_PROVIDER_"


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration."""


@dataclass
class InputSpec:
    path: str
    fps: str | None = None  # required for .ppm frame directories


@dataclass
class SceneConfig:
    threshold: float = analysis.DEFAULT_SCENE_THRESHOLD
    min_scene_len: int = analysis.DEFAULT_MIN_SCENE_LEN

    def validate(self) -> None:
        if self.threshold <= 0:
            raise ConfigError(f"scene.threshold must be positive, got {self.threshold}")
        if self.min_scene_len < 2:
            raise ConfigError(
                f"scene.min_scene_len must be >= 2 so every clip supports flow "
                f"scoring, got {self.min_scene_len}"
            )


@dataclass
class AnalysisConfig:
    block_size: int = analysis.DEFAULT_BLOCK_SIZE
    search_radius: int = analysis.DEFAULT_SEARCH_RADIUS
    flow_sample_fps: float = analysis.DEFAULT_FLOW_SAMPLE_FPS
    text_band_fraction: float = 0.25
    text_glyph_min_area: int = 4
    text_glyph_max_area_frac: float = 0.2
    text_glyph_min_aspect: float = 0.08
    text_glyph_max_aspect: float = 12.0
    aesthetic_weights: tuple[float, float, float] = analysis.DEFAULT_AESTHETIC_WEIGHTS
    colorfulness_norm: float = analysis.DEFAULT_COLORFULNESS_NORM
    contrast_norm: float = analysis.DEFAULT_CONTRAST_NORM
    sharpness_norm: float = analysis.DEFAULT_SHARPNESS_NORM
    motion_breakpoints: tuple[float, ...] = analysis.DEFAULT_MOTION_BREAKPOINTS
    smoothness_residual_norm: float = analysis.DEFAULT_SMOOTHNESS_RESIDUAL_NORM
    score_sample_frames: int = 8


@dataclass
class FilterConfig:
    target_retention: float | None = None
    rule: FilterRule | None = None


@dataclass
class ProvidersConfig:
    caption: str = "ref:"
    embed: str = "ref:"
    char: str = "ref:"
    smoothness: str = ""  # empty: use the in-process reference smoothness


@dataclass
class ScheduleConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ConditioningConfig:
    c_text: int = 8
    interior_candidates: int = 2
    motion_area: bool = False
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)


@dataclass
class EvaluationConfig:
    benchmark: str = ""
    character_store: str = ""
    models: dict[str, str] = field(default_factory=dict)
    char_sample_frames: int = 8
    keyframe_count: int = 5
    flow_threshold: float = 1.0


@dataclass
class PipelineConfig:
    inputs: list[InputSpec] = field(default_factory=list)
    out_dir: str = "out"
    workers: int = 1
    seed: int = 0
    provider_timeout_s: float = DEFAULT_TIMEOUT_SECONDS
    provider_retries: int = DEFAULT_RETRIES
    scene: SceneConfig = field(default_factory=SceneConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    providers: ProvidersConfig = field(default_factory=ProvidersConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        self.scene.validate()


_NESTED = {
    "scene": SceneConfig,
    "analysis": AnalysisConfig,
    "filter": FilterConfig,
    "providers": ProvidersConfig,
    "conditioning": ConditioningConfig,
    "evaluation": EvaluationConfig,
    "schedule": ScheduleConfig,
}


def _build(cls: type, data: Any, location: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{location} must be an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}' in {location}")
    kwargs = {}
    for key, value in data.items():
        where = f"{location}.{key}"
        if key in _NESTED and _NESTED[key] is not None and isinstance(value, dict):
            kwargs[key] = _build(_NESTED[key], value, where)
        elif key == "inputs":
            if not isinstance(value, list):
                raise ConfigError(f"{where} must be a list")
            kwargs[key] = [_build(InputSpec, item, f"{where}[{i}]") for i, item in enumerate(value)]
        elif key == "rule" and value is not None:
            try:
                kwargs[key] = FilterRule.from_dict(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}: {exc}") from exc
        elif key in ("aesthetic_weights", "motion_breakpoints") and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{location}: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    """Load, type-check, and validate a pipeline config file."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    config = _build(PipelineConfig, data, "config")
    config.validate()
    return config


def stage_seed(seed: int, stage: str) -> int:
    """Stable per-stage seed derived from the single config seed."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def provider_endpoint(config: PipelineConfig, role: str) -> str:
    """Endpoint string for a role, honoring the environment override."""
    if role not in PROVIDER_ROLES:
        raise ConfigError(f"unknown provider role {role!r}")
    env = os.environ.get(ENV_PREFIX + role.upper())
    if env is not None:
        return env
    return getattr(config.providers, role)


def resolve_provider(config: PipelineConfig, role: str) -> Provider | None:
    """Instantiate the provider for a role; None when unconfigured."""
    endpoint = provider_endpoint(config, role)
    if not endpoint:
        return None
    return resolve_endpoint(endpoint, config.provider_timeout_s, config.provider_retries)
