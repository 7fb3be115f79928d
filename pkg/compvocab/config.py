"""Pipeline configuration: env / .env / JSON config file, one settings singleton."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from compvocab.exceptions import ConfigError

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1


# ── Feature extraction ────────────────────────────────────────────────────────

class FeatureSettings(BaseModel):
    wavelength: float = Field(6.0, gt=0)
    aspect: float = Field(0.75, gt=0)
    sigma: float = Field(2.0, gt=0)
    num_orientations: int = Field(6, ge=2)
    min_energy: float = Field(0.1, ge=0, le=1)
    scales_per_octave: int = Field(2, ge=1)
    pyramid_floor: int = Field(32, ge=1)
    # blur sigma between pyramid levels = blur_factor * scale ratio
    blur_factor: float = Field(0.8, gt=0)


# ── Inference ─────────────────────────────────────────────────────────────────

class InferenceSettings(BaseModel):
    object_layer: int = Field(6, ge=2)
    tau: float = Field(0.05, ge=0, lt=1)
    radius_low: int = Field(8, ge=1)      # r^2
    radius_mid: int = Field(12, ge=1)     # r^3 .. r^(O-1)
    radius_object: int = Field(15, ge=1)  # r^O
    rho_first: float = Field(1.0, gt=0, le=1)
    rho: float = Field(0.5, gt=0, le=1)
    reference_epsilon: float = Field(0.5, gt=0)
    repulsive_alpha: float = Field(0.1, ge=0, le=1)

    def radius(self, layer: int) -> int:
        if layer <= 2:
            return self.radius_low
        if layer >= self.object_layer:
            return self.radius_object
        return self.radius_mid

    def downsample(self, layer: int) -> float:
        return self.rho_first if layer == 1 else self.rho


# ── Learning ──────────────────────────────────────────────────────────────────

class LearningSettings(BaseModel):
    max_overlap: float = Field(0.2, ge=0, le=1)
    mode_mass_fraction: float = Field(0.01, ge=0, le=1)
    mode_min_count: float = Field(3.0, ge=0)
    smooth_from_layer: int = 4
    fit_window: int = Field(5, ge=3)
    mode_suppression: int = Field(2, ge=0)
    cov_floor: float = Field(0.25, gt=0)
    layer1_cov_floor: float = Field(0.01, gt=0)
    layer1_min_samples: int = Field(10, ge=1)
    layer1_prior_var: float = Field(0.05, gt=0)
    max_centers: int = Field(2000, ge=1)
    # None: max_parts - 1, enough matches for the largest composition
    matches_per_neighborhood: int | None = Field(None, ge=1)
    max_parts: int = Field(10, ge=2)
    parts_penalty_fraction: float = Field(0.05, ge=0)
    residual_epsilon: float = Field(0.1, ge=0)
    stop_fraction: float = Field(0.05, ge=0, le=1)
    mcmc_beta: float = Field(1.05, gt=1)
    mcmc_iterations: int = Field(100, ge=0)
    move_exchange: float = Field(0.5, ge=0)
    move_add: float = Field(0.25, ge=0)
    move_remove: float = Field(0.25, ge=0)
    em_rounds: int = Field(3, ge=0)
    appearance_iou: float = Field(0.8, ge=0, le=1)
    or_cutoff: float = Field(0.25, ge=0)
    or_samples: int = Field(50, ge=1)
    sc_radial_bins: int = Field(5, ge=1)
    sc_angular_bins: int = Field(12, ge=1)
    object_candidates: int = Field(30, ge=1)
    f_measure_floor: float = Field(0.01, ge=0)
    discover_repulsive: bool = False
    box_diagonal: float = Field(250.0, gt=0)
    box_margin: float = Field(0.25, ge=0)
    safety_fraction: float = Field(0.9, ge=0, le=1)

    @model_validator(mode="after")
    def check_move_mix(self):
        if self.move_exchange + self.move_add + self.move_remove <= 0:
            raise ValueError("MCMC move mix must have positive mass")
        return self


# ── Detection / evaluation ────────────────────────────────────────────────────

class DetectionSettings(BaseModel):
    upscale: float = Field(3.0, gt=0)
    levels: int = Field(6, ge=1)
    nms_iou: float = Field(0.5, ge=0, le=1)
    box_padding: int = Field(2, ge=0)
    iou_threshold: float = Field(0.5, gt=0, le=1)
    fppi_target: float = Field(0.4, ge=0)
    classification_layer: int = Field(3, ge=1)
    angular_cells: int = Field(5, ge=1)
    radial_cells: int = Field(2, ge=1)
    classification_scales: int = Field(3, ge=1)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="COMPVOCAB_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    config_version: int = CONFIG_VERSION
    seed: int = 0
    workers: int = Field(1, ge=1)
    log_level: str = "INFO"

    # Storage
    cache_dir: Path = Path(".compvocab/cache")
    database_url: str = "sqlite:///.compvocab/compvocab.db"

    features: FeatureSettings = FeatureSettings()
    inference: InferenceSettings = InferenceSettings()
    learning: LearningSettings = LearningSettings()
    detection: DetectionSettings = DetectionSettings()

    @model_validator(mode="after")
    def check_version(self):
        if self.config_version != CONFIG_VERSION:
            raise ValueError(
                f"config_version {self.config_version} unsupported (expected {CONFIG_VERSION})"
            )
        return self


def load_settings(path: str | Path | None = None, **overrides: Any) -> Settings:
    """Settings from a JSON config file layered over env and defaults."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file must hold a JSON object: {path}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        loaded = Settings(**data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    logger.debug("Settings loaded (file=%s)", path)
    return loaded


settings = Settings()


def apply_settings(new: Settings) -> Settings:
    """Copy `new` onto the shared singleton so every module sees it."""
    for name in Settings.model_fields:
        setattr(settings, name, getattr(new, name))
    return settings
