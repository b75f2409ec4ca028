"""Experiment configuration (JSON, versioned, unknown keys rejected)."""
from __future__ import annotations

import difflib
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data.dataset import GeneratorConfig
from .errors import ConfigError
from .models import ModelConfig
from .training import LOSS_NAMES, TrainConfig

CONFIG_VERSION = "1"
ABLATION_KEYS = tuple(f"disable_{n}" for n in LOSS_NAMES)


def reject_unknown(d, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    for key in d:
        if key not in allowed:
            hint = difflib.get_close_matches(key, list(allowed), n=1)
            msg = f"{where}: unknown key '{key}'"
            if hint:
                msg += f" (did you mean '{hint[0]}'?)"
            raise ConfigError(msg)


def strict_fields(cls, d, where: str) -> dict:
    names = [f.name for f in fields(cls) if not f.name.startswith("_")]
    reject_unknown(d, names, where)
    return dict(d)


@dataclass
class ExperimentConfig:
    version: str = CONFIG_VERSION
    name: str = "casenet"
    seed: int = 0
    profile: str = "desk"
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    data_dir: str | None = None
    model: dict = field(default_factory=dict)       # ModelConfig overrides
    train: TrainConfig = field(default_factory=TrainConfig)
    protocols: list = field(default_factory=lambda: ["rr", "gr", "rg", "gg"])
    out_dir: str = "runs/casenet"
    ablation: dict = field(default_factory=lambda: {k: False for k in ABLATION_KEYS})
    normalize_features: bool = False
    same_view_exclusion: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kw = strict_fields(cls, d, "config")
        version = str(kw.get("version", CONFIG_VERSION))
        if version != CONFIG_VERSION:
            raise ConfigError(f"config: unsupported version {version!r} (expected {CONFIG_VERSION!r})")
        if "data" in kw:
            kw["data"] = GeneratorConfig.from_dict(kw["data"])
        if "train" in kw:
            kw["train"] = TrainConfig.from_dict(kw["train"])
        if "model" in kw:
            reject_unknown(kw["model"], [f.name for f in fields(ModelConfig)], "model")
        if "ablation" in kw:
            reject_unknown(kw["ablation"], ABLATION_KEYS, "ablation")
            abl = {k: False for k in ABLATION_KEYS}
            abl.update({k: bool(v) for k, v in kw["ablation"].items()})
            kw["ablation"] = abl
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "name": self.name,
            "seed": self.seed,
            "profile": self.profile,
            "data": self.data.to_dict(),
            "data_dir": self.data_dir,
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "protocols": list(self.protocols),
            "out_dir": self.out_dir,
            "ablation": dict(self.ablation),
            "normalize_features": self.normalize_features,
            "same_view_exclusion": self.same_view_exclusion,
        }

    def validate(self) -> None:
        from .evaluation import Protocol
        if self.profile not in ("desk", "paper"):
            raise ConfigError(f"config: unknown profile {self.profile!r}")
        for p in self.protocols:
            Protocol.parse(p)
        if all(self.ablation.values()):
            raise ConfigError("ablation: cannot disable every loss")
        self.data.validate()
        self.train_config().validate()

    def disabled_losses(self) -> tuple:
        return tuple(n for n in LOSS_NAMES if self.ablation.get(f"disable_{n}"))

    def train_config(self, mode: str | None = None) -> TrainConfig:
        d = self.train.to_dict()
        d["seed"] = self.seed
        d["disabled"] = list(self.disabled_losses())
        if mode is not None:
            d["mode"] = mode
        return TrainConfig.from_dict(d)

    def model_config(self, num_classes: int, height: int, width: int) -> ModelConfig:
        base = ModelConfig.paper(num_classes) if self.profile == "paper" else ModelConfig(num_classes=num_classes)
        d = base.to_dict()
        d.update(self.model)
        d.update(profile=self.profile, num_classes=num_classes, height=height, width=width)
        return ModelConfig.from_dict(d)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(d)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
