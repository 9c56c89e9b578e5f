"""Single-file experiment configuration (JSON) with strict sections."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .detector import DetectorConfig
from .emc import EmcConfig, EmcTrainConfig
from .kalman import ProbMotConfig
from .metrics import MetricsConfig
from .scene import SceneConfig
from .tracker import TrackerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 100
    n_val: int = 20
    base_seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict) -> "DataConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        out = cls(**obj)
        if out.n_train < 0 or out.n_val < 0:
            raise ConfigError("scene counts must be non-negative")
        return out

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_SECTIONS = {
    "data": DataConfig,
    "scene": SceneConfig,
    "detector": DetectorConfig,
    "detector_training": TrainConfig,
    "emc": EmcConfig,
    "emc_training": EmcTrainConfig,
    "tracker_training": TrainConfig,
    "tracker": TrackerConfig,
    "baseline": ProbMotConfig,
    "metrics": MetricsConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    workers: int = 1  # processes for per-scene evaluation
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    detector_training: TrainConfig = field(default_factory=TrainConfig)
    emc: EmcConfig = field(default_factory=EmcConfig)
    emc_training: EmcTrainConfig = field(default_factory=EmcTrainConfig)
    tracker_training: TrainConfig = field(default_factory=TrainConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    baseline: ProbMotConfig = field(default_factory=ProbMotConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    # extra scene-generation overrides for each split, e.g. {"val": {"n_agents_max": 3}}
    split_overrides: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("experiment config must be a JSON object")
        allowed = {"seed", "workers", "split_overrides", *_SECTIONS}
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, typ in _SECTIONS.items():
            if name in obj:
                if not isinstance(obj[name], dict):
                    raise ConfigError(f"section {name!r} must be an object")
                try:
                    kwargs[name] = typ.from_dict(obj[name])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"section {name!r}: {exc}") from exc
        if not isinstance(obj.get("seed", 0), int) or not isinstance(obj.get("workers", 1), int):
            raise ConfigError("seed and workers must be integers")
        if obj.get("workers", 1) < 1:
            raise ConfigError("workers must be >= 1")
        cfg = cls(seed=obj.get("seed", 0), workers=obj.get("workers", 1), split_overrides=dict(obj.get("split_overrides", {})), **kwargs)
        try:
            cfg.scene.validate()
            cfg.detector.validate()
            cfg.tracker.validate()
            cfg.baseline.validate()
            cfg.emc.width(cfg.detector.d_model)
            for split, over in cfg.split_overrides.items():
                cfg.scene_for(split)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "workers": self.workers, "split_overrides": self.split_overrides}
        for name in _SECTIONS:
            out[name] = getattr(self, name).to_dict()
        return out

    def scene_for(self, split: str) -> SceneConfig:
        over = self.split_overrides.get(split, {})
        if not over:
            return self.scene
        merged = {**self.scene.to_dict(), **over}
        return SceneConfig.from_dict(merged).validate()

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return ExperimentConfig.from_dict(obj)


def bundled_config(name: str = "tiny") -> Path:
    return Path(__file__).with_name("configs") / f"{name}.json"
