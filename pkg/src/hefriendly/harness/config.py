"""Experiment configuration read from YAML."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from ..errors import ConfigError
from ..estimator import ARMS
from .data import DatasetSpec

OUTPUT_ROOT_ENV = "HEFRIENDLY_OUT"
DEFAULT_SEEDS = (111, 222, 333, 444, 555)


@dataclass(frozen=True)
class TransitionConfig:
    start_epoch: int = 3
    duration: int = 10


@dataclass(frozen=True)
class KDConfig:
    enabled: bool = True
    tau: float = 10.0
    alpha: float = 0.1
    teacher_checkpoint: Optional[str] = None
    delay_until_poly: bool = False


@dataclass
class TrainConfig:
    model: str = "small_cnn"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    arms: tuple = ("tp_st",)
    seeds: tuple = DEFAULT_SEEDS
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-4
    transition: TransitionConfig = field(default_factory=TransitionConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    coef_init: str = "relu_like"
    warm_start: str = "teacher"
    source: Optional[str] = None

    def __post_init__(self):
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown:
            raise ConfigError(f"unknown arms {unknown}; choose from {ARMS}")
        if "tp_st_kd" in self.arms and not self.kd.enabled:
            raise ConfigError("arm 'tp_st_kd' requested but kd.enabled is false")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    @classmethod
    def from_dict(cls, d: dict, source: Optional[str] = None) -> "TrainConfig":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__) | {"arm"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        if "arm" in d:
            kwargs["arms"] = (d.pop("arm"),)
        if "arms" in d:
            kwargs["arms"] = tuple(d.pop("arms"))
        if "seeds" in d:
            kwargs["seeds"] = tuple(int(s) for s in d.pop("seeds"))
        if "dataset" in d:
            ds = d.pop("dataset")
            kwargs["dataset"] = DatasetSpec(name=ds) if isinstance(ds, str) else DatasetSpec.from_dict(ds)
        if "transition" in d:
            kwargs["transition"] = TransitionConfig(**_typed(d.pop("transition"), {"start_epoch": int, "duration": int}))
        if "kd" in d:
            kwargs["kd"] = KDConfig(**_typed(d.pop("kd"), {"enabled": bool, "tau": float, "alpha": float}))
        for key, typ in (("epochs", int), ("batch_size", int), ("lr", float)):
            if key in d:
                kwargs[key] = typ(d.pop(key))
        kwargs.update(d)
        return cls(source=source, **kwargs)

    @classmethod
    def from_yaml(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw, source=str(path))

    @classmethod
    def shipped(cls, name: str = "ablation") -> "TrainConfig":
        text = resources.files("hefriendly.configs").joinpath(f"{name}.yaml").read_text()
        return cls.from_dict(yaml.safe_load(text), source=name)

    def override(self, **changes) -> "TrainConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes)

    def to_dict(self) -> dict:
        ds = self.dataset
        return {
            "model": self.model,
            "dataset": {
                "name": ds.name,
                "train_size": ds.train_size,
                "val_size": ds.val_size,
                "test_size": ds.test_size,
                "num_classes": ds.num_classes,
                "image_shape": list(ds.image_shape),
                "noise": ds.noise,
                "augment": {"hflip": ds.hflip, "rotation": ds.rotation, "normalize": ds.normalize,
                            "resize": list(ds.resize) if ds.resize else None},
            },
            "arms": list(self.arms),
            "seeds": list(self.seeds),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "transition": {"start_epoch": self.transition.start_epoch, "duration": self.transition.duration},
            "kd": {"enabled": self.kd.enabled, "tau": self.kd.tau, "alpha": self.kd.alpha,
                   "teacher_checkpoint": self.kd.teacher_checkpoint,
                   "delay_until_poly": self.kd.delay_until_poly},
            "coef_init": self.coef_init,
            "warm_start": self.warm_start,
        }


def _typed(d: dict, types: dict) -> dict:
    out = dict(d or {})
    for key, typ in types.items():
        if key in out and out[key] is not None:
            out[key] = typ(out[key])
    return out


def output_root(explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
