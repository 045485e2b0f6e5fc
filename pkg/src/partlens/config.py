"""Experiment configuration: one JSON tree, schema-validated, fully defaulted.

Unknown keys are rejected so a typo cannot silently fall back to a default.
Weights whose default depends on run geometry (lambda_filter, tau,
positive_mass) stay null in the config and are resolved at training time;
the resolved values are recorded in the checkpoint.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    num_scenes: int = Field(default=600, ge=10)
    image_size: int = Field(default=64, ge=32)
    categories: int = Field(default=2, ge=1)
    parts_per_category: int = Field(default=4, ge=2)
    jitter_frac: float = Field(default=0.1, ge=0.0, le=0.1)
    scale_min: float = Field(default=0.9, gt=0.0)
    scale_max: float = Field(default=1.1, gt=0.0)
    noise_sigma: float = Field(default=0.04, ge=0.0)
    clutter_dots: int = Field(default=5, ge=0)
    glyph_size: int = Field(default=9, ge=5)
    split_train: float = Field(default=0.8, gt=0.0, lt=1.0)
    split_val: float = Field(default=0.1, gt=0.0, lt=1.0)
    split_test: float = Field(default=0.1, gt=0.0, lt=1.0)
    image_format: Literal["png", "f32"] = "png"

    @model_validator(mode="after")
    def _check(self):
        if abs(self.split_train + self.split_val + self.split_test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must be <= scale_max")
        if self.glyph_size % 2 == 0:
            raise ValueError("glyph_size must be odd")
        return self


class PerformerSection(_Section):
    channels: tuple[int, int, int, int] = (16, 32, 32, 32)
    kernel: int = Field(default=3, ge=3)
    tap_layer: int = Field(default=3, ge=1, le=4)
    fc1: int = Field(default=64, ge=2)
    fc2: int = Field(default=32, ge=2)
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.1, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    lr_decay: float = Field(default=0.97, gt=0.0, le=1.0)
    min_val_accuracy: float = Field(default=0.95, ge=0.0, le=1.0)


class ExplainerSection(_Section):
    filters: int = Field(default=16, ge=1)
    kernel: int = Field(default=3, ge=1)


class LossesSection(_Section):
    lambda_fc1: float = Field(default=1.0, ge=0.0)
    lambda_fc2: float = Field(default=1.0, ge=0.0)
    eta: float = Field(default=0.2, ge=0.0)
    # our own defaults; the method's source gives no values for these weights
    lambda_filter: Optional[float] = Field(default=None, ge=0.0)
    tau: Optional[float] = Field(default=None, gt=0.0)
    beta: float = Field(default=4.0, gt=0.0)
    positive_mass: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    score_temperature: float = Field(default=1.0, gt=0.0)


class TrainSection(_Section):
    epochs: int = Field(default=60, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.05, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    lr_decay: float = Field(default=0.98, gt=0.0, le=1.0)
    rms_momentum: float = Field(default=0.99, ge=0.0, lt=1.0)
    assignment_refresh: int = Field(default=1, ge=1)
    log_every: int = Field(default=10, ge=1)


class EvalSection(_Section):
    split: Literal["train", "val", "test"] = "test"
    min_active_images: int = Field(default=30, ge=1)
    landmark_aggregation: Literal["mean", "nearest"] = "mean"
    gradcam_images: int = Field(default=6, ge=0)
    top_crops: int = Field(default=9, ge=1)


class PathsSection(_Section):
    out_root: Optional[str] = None  # falls back to $EXPLAINER_HOME or ./experiments


class ExperimentConfig(_Section):
    seed: int = 0
    data: DataSection = DataSection()
    performer: PerformerSection = PerformerSection()
    explainer: ExplainerSection = ExplainerSection()
    losses: LossesSection = LossesSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()

    def normalized(self) -> dict:
        return json.loads(self.model_dump_json())

    def config_hash(self) -> str:
        canonical = json.dumps(self.normalized(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:10]


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_validation_error(exc)}") from exc


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply dotted-path `key=value` overrides onto a raw config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, text = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a non-mapping")
        node[keys[-1]] = _parse_override_value(text)
    return raw


def validate_config(
    path: Path | str | None, overrides: list[str] | None = None
) -> ExperimentConfig:
    """Load, override, and schema-check a config file (None = all defaults)."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    if overrides:
        raw = apply_overrides(raw, list(overrides))
    return config_from_dict(raw)


def config_schema() -> dict:
    """The published JSON schema every config is validated against."""
    return ExperimentConfig.model_json_schema()
