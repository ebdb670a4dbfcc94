#!/usr/bin/env python3
"""
JSON-backed run configuration:

    {"raster": {...RasterConfig}, "model": {...model settings},
     "loss": {...LossConfig}, "train": {...TrainConfig}}

Missing sections and keys take the module defaults; unknown sections or keys
are rejected. Input dimension and class count are not configurable here: they
come from the features and the class map.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from heatmap_raster import RasterConfig
from pose_data import ValidationError
from seg_losses import LossConfig
from train_harness import MODEL_SETTINGS, TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = ('raster', 'model', 'loss', 'train')


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ValidationError(f"config section '{section}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValidationError(f"unknown config key(s) {', '.join(f'{section}.{k}' for k in unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ValidationError(f"bad value in config section '{section}': {e}") from e


@dataclass(frozen=True)
class RunConfig:
    raster: RasterConfig = field(default_factory=RasterConfig)
    model: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        unknown = sorted(set(self.model) - set(MODEL_SETTINGS))
        if unknown:
            raise ValidationError(f"unknown config key(s) {', '.join(f'model.{k}' for k in unknown)}")

    @classmethod
    def from_dict(cls, payload: dict) -> 'RunConfig':
        if not isinstance(payload, dict):
            raise ValidationError("config must be a JSON object")
        unknown = sorted(set(payload) - set(SECTIONS))
        if unknown:
            raise ValidationError(f"unknown config section(s): {', '.join(unknown)}")
        model = payload.get('model', {})
        if not isinstance(model, dict):
            raise ValidationError("config section 'model' must be an object")
        return cls(raster=_build(RasterConfig, 'raster', payload.get('raster', {})),
                   model=dict(model),
                   loss=_build(LossConfig, 'loss', payload.get('loss', {})),
                   train=_build(TrainConfig, 'train', payload.get('train', {})))

    @classmethod
    def from_json(cls, path) -> 'RunConfig':
        path = Path(path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                payload = json.load(f)
        except OSError as e:
            raise ValidationError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
        logger.debug(f"📂 Loaded run config {path}")
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return {'raster': asdict(self.raster), 'model': dict(self.model),
                'loss': asdict(self.loss), 'train': asdict(self.train)}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    def with_train(self, **overrides) -> 'RunConfig':
        """Apply CLI overrides; None values keep the configured setting."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, train=replace(self.train, **changes)) if changes else self

    def with_raster(self, **overrides) -> 'RunConfig':
        changes = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, raster=replace(self.raster, **changes)) if changes else self


def load_run_config(path: Optional[str]) -> RunConfig:
    return RunConfig.from_json(path) if path else RunConfig()
